"""Procedural watertight shapes for desk-scale datasets, plus the Chamfer
and variety metrics used to evaluate reconstructions and samples."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .shapefields import TriMesh, encode_shape, normalize_mesh
from .tetgrid import GridHierarchy

KINDS = ("sphere", "torus", "box", "capsule")


class ShapeParameterError(ValueError):
    """Shape parameters that would produce a degenerate or self-intersecting mesh."""


def make_sphere(radius: float = 0.5, subdivisions: int = 3) -> TriMesh:
    """Icosphere: subdivided icosahedron projected onto the sphere."""
    if radius <= 0:
        raise ShapeParameterError(f"sphere radius must be positive, got {radius}")
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
            (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
            (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
            (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
            (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
            (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
        ],
        dtype=np.int64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    for _ in range(subdivisions):
        verts_list = list(verts)
        midcache = {}

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in midcache:
                p = verts_list[i] + verts_list[j]
                midcache[key] = len(verts_list)
                verts_list.append(p / np.linalg.norm(p))
            return midcache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        verts = np.asarray(verts_list)
        faces = np.asarray(new_faces, dtype=np.int64)
    return TriMesh(verts * radius, faces)


def make_torus(ring_radius: float = 0.3, tube_radius: float = 0.12,
               segments: int = 32, sides: int = 16) -> TriMesh:
    if tube_radius >= ring_radius:
        raise ShapeParameterError(
            f"torus tube radius {tube_radius} must be smaller than ring radius {ring_radius}"
        )
    if tube_radius <= 0:
        raise ShapeParameterError(f"tube radius must be positive, got {tube_radius}")
    u = 2 * np.pi * np.arange(segments) / segments
    v = 2 * np.pi * np.arange(sides) / sides
    uu, vv = np.meshgrid(u, v, indexing="ij")
    x = (ring_radius + tube_radius * np.cos(vv)) * np.cos(uu)
    y = (ring_radius + tube_radius * np.cos(vv)) * np.sin(uu)
    z = tube_radius * np.sin(vv)
    verts = np.stack([x, y, z], axis=-1).reshape(-1, 3)

    def vid(i, j):
        return (i % segments) * sides + (j % sides)

    faces = []
    for i in range(segments):
        for j in range(sides):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            faces += [(a, b, c), (a, c, d)]
    return TriMesh(verts, np.asarray(faces, dtype=np.int64))


def make_box(extents=(1.0, 1.0, 1.0)) -> TriMesh:
    ex = np.asarray(extents, dtype=np.float64)
    if (ex <= 0).any():
        raise ShapeParameterError(f"box extents must be positive, got {extents}")
    corners = np.array(
        [(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.float64
    )
    verts = (corners - 0.5) * ex
    faces = np.array(
        [
            (0, 1, 3), (0, 3, 2),          # -x
            (4, 6, 7), (4, 7, 5),          # +x
            (0, 4, 5), (0, 5, 1),          # -y
            (2, 3, 7), (2, 7, 6),          # +y
            (0, 2, 6), (0, 6, 4),          # -z
            (1, 5, 7), (1, 7, 3),          # +z
        ],
        dtype=np.int64,
    )
    return TriMesh(verts, faces)


def make_capsule(radius: float = 0.15, height: float = 0.4,
                 segments: int = 24, rings: int = 6) -> TriMesh:
    """Cylinder with hemispherical caps; watertight by construction."""
    if radius <= 0 or height < 0:
        raise ShapeParameterError(
            f"capsule needs radius > 0 and height >= 0, got {radius}, {height}"
        )
    half = height / 2.0
    ring_rows = []
    # top pole down to the equator at +half, then equator to bottom pole at -half
    lats_top = np.linspace(0, np.pi / 2, rings + 1)[1:]
    lats_bot = np.linspace(np.pi / 2, np.pi, rings + 1)[:-1]
    for lat in lats_top:
        ring_rows.append((radius * np.sin(lat), half + radius * np.cos(lat)))
    for lat in lats_bot:
        ring_rows.append((radius * np.sin(lat), -half + radius * np.cos(lat)))
    ang = 2 * np.pi * np.arange(segments) / segments
    verts = [np.array([0.0, 0.0, half + radius])]
    for r, z in ring_rows:
        for a in ang:
            verts.append(np.array([r * np.cos(a), r * np.sin(a), z]))
    verts.append(np.array([0.0, 0.0, -half - radius]))
    verts = np.asarray(verts)
    top, bottom = 0, len(verts) - 1

    def vid(row, j):
        return 1 + row * segments + (j % segments)

    faces = []
    for j in range(segments):
        faces.append((top, vid(0, j), vid(0, j + 1)))
    for row in range(len(ring_rows) - 1):
        for j in range(segments):
            a, b = vid(row, j), vid(row, j + 1)
            c, d = vid(row + 1, j), vid(row + 1, j + 1)
            faces += [(a, c, b), (b, c, d)]
    last = len(ring_rows) - 1
    for j in range(segments):
        faces.append((bottom, vid(last, j + 1), vid(last, j)))
    return TriMesh(verts, np.asarray(faces, dtype=np.int64))


_PRIMITIVES = {
    "sphere": make_sphere,
    "torus": make_torus,
    "box": make_box,
    "capsule": make_capsule,
}


@dataclass
class ShapeSpec:
    """A procedural shape plus its rigid pose inside the unit cube."""

    kind: str
    params: dict = field(default_factory=dict)
    quaternion: tuple = (1.0, 0.0, 0.0, 0.0)  # (w, x, y, z)
    fit: float = 1.0        # fraction of the margin box the shape fills
    offset: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": self.params,
            "quaternion": list(self.quaternion),
            "fit": self.fit,
            "offset": list(self.offset),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        return cls(
            kind=d["kind"],
            params=dict(d.get("params", {})),
            quaternion=tuple(d.get("quaternion", (1.0, 0.0, 0.0, 0.0))),
            fit=float(d.get("fit", 1.0)),
            offset=tuple(d.get("offset", (0.0, 0.0, 0.0))),
            seed=int(d.get("seed", 0)),
        )


def _quat_to_matrix(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def generate(spec: ShapeSpec, margin: float = 0.05) -> TriMesh:
    """Posed watertight mesh inside the normalization margin; deterministic."""
    if spec.kind not in _PRIMITIVES:
        raise ShapeParameterError(f"unknown shape kind {spec.kind!r}")
    if not 0.0 < spec.fit <= 1.0:
        raise ShapeParameterError(f"fit must be in (0, 1], got {spec.fit}")
    mesh = _PRIMITIVES[spec.kind](**spec.params)
    R = _quat_to_matrix(spec.quaternion)
    mesh = TriMesh(mesh.vertices @ R.T, mesh.faces)
    mesh = normalize_mesh(mesh, margin)
    # shrink about the cube center, then translate within the freed slack
    scale = spec.fit
    center = np.full(3, 0.5)
    verts = (mesh.vertices - center) * scale + center
    slack = (1.0 - 2 * margin) * (1.0 - scale) / 2.0
    shift = np.clip(np.asarray(spec.offset, dtype=np.float64), -slack, slack)
    return TriMesh(verts + shift, mesh.faces)


def random_spec(kind: str, seed: int) -> ShapeSpec:
    rng = np.random.default_rng(seed)
    if kind == "sphere":
        params = {"radius": float(rng.uniform(0.3, 0.5)), "subdivisions": 3}
    elif kind == "torus":
        ring = float(rng.uniform(0.25, 0.35))
        params = {
            "ring_radius": ring,
            "tube_radius": float(rng.uniform(0.38, 0.55) * ring),
            "segments": 32,
            "sides": 16,
        }
    elif kind == "box":
        params = {"extents": [float(rng.uniform(0.4, 1.0)) for _ in range(3)]}
    elif kind == "capsule":
        params = {
            "radius": float(rng.uniform(0.12, 0.2)),
            "height": float(rng.uniform(0.2, 0.5)),
            "segments": 24,
            "rings": 6,
        }
    else:
        raise ShapeParameterError(f"unknown shape kind {kind!r}")
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    fit = float(rng.uniform(0.8, 1.0))
    offset = tuple(rng.uniform(-0.05, 0.05, size=3))
    return ShapeSpec(kind=kind, params=params, quaternion=tuple(q),
                     fit=fit, offset=offset, seed=seed)


def sample_surface(mesh: TriMesh, n: int, rng) -> np.ndarray:
    """Area-uniform surface samples."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    fi = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.uniform(size=n)
    v = rng.uniform(size=n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    tri = mesh.vertices[mesh.faces[fi]]
    return tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])


def chamfer(mesh_a: TriMesh, mesh_b: TriMesh, n_samples: int = 10000,
            seed: int = 0) -> float:
    """Symmetric squared Chamfer distance over area-uniform samples:
    mean squared closest distance A->B plus B->A, halved.

    Each mesh's samples are seeded from its own content digest, so the value
    does not depend on the argument order."""
    if mesh_a.is_empty or mesh_b.is_empty:
        raise ValueError("chamfer needs nonempty meshes")
    pa = sample_surface(mesh_a, n_samples, _mesh_rng(mesh_a, seed))
    pb = sample_surface(mesh_b, n_samples, _mesh_rng(mesh_b, seed))
    _, da, _ = mesh_b.tree.closest_points(pa)
    _, db, _ = mesh_a.tree.closest_points(pb)
    return 0.5 * (float(np.mean(da**2)) + float(np.mean(db**2)))


def _mesh_rng(mesh: TriMesh, seed: int):
    digest = int(_mesh_digest(mesh)[:12], 16)
    return np.random.default_rng([seed, digest])


def _mesh_digest(mesh: TriMesh) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mesh.vertices).tobytes())
    h.update(np.ascontiguousarray(mesh.faces).tobytes())
    return h.hexdigest()


def variety(meshes, k_pairs: int = 250, n_closest: int = 25, seed: int = 0,
            n_samples: int = 10000) -> float:
    """Mean Chamfer distance of the n most similar pairs among k sampled
    pairs.  Input order does not matter: meshes are canonically sorted by
    content digest before the seeded pair sampling."""
    if len(meshes) < 2:
        raise ValueError("variety needs at least 2 meshes")
    if n_closest > k_pairs:
        raise ValueError(f"n_closest {n_closest} exceeds k_pairs {k_pairs}")
    order = sorted(range(len(meshes)), key=lambda i: _mesh_digest(meshes[i]))
    meshes = [meshes[i] for i in order]
    n = len(meshes)
    all_pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    rng = np.random.default_rng(seed)
    if k_pairs >= len(all_pairs):
        pairs = all_pairs
    else:
        idx = rng.choice(len(all_pairs), size=k_pairs, replace=False)
        pairs = [all_pairs[i] for i in idx]
    dists = sorted(
        chamfer(meshes[i], meshes[j], n_samples=n_samples, seed=seed)
        for i, j in pairs
    )
    take = min(n_closest, len(dists))
    return float(np.mean(dists[:take]))


@dataclass
class ToyDataset:
    specs: list
    meshes: list
    fields: list
    train_indices: np.ndarray
    val_indices: np.ndarray

    @property
    def train_fields(self):
        return [self.fields[i] for i in self.train_indices]

    @property
    def val_fields(self):
        return [self.fields[i] for i in self.val_indices]


def build_toy_dataset(count: int, seed: int, hierarchy: GridHierarchy,
                      margin: float = 0.05) -> ToyDataset:
    """Randomized procedural shapes encoded on the hierarchy, with a 5/1
    train/validation split drawn from the same seed."""
    if count < 1:
        raise ValueError("dataset count must be >= 1")
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(count):
        kind = KINDS[i % len(KINDS)]
        specs.append(random_spec(kind, int(rng.integers(0, 2**31 - 1))))
    meshes = [generate(s, margin) for s in specs]
    fields = [encode_shape(mesh, hierarchy) for mesh in meshes]
    order = rng.permutation(count)
    n_val = count // 6
    val = np.sort(order[:n_val])
    train = np.sort(order[n_val:])
    return ToyDataset(specs, meshes, fields, train, val)


def save_manifest(specs, path) -> None:
    with open(path, "w") as f:
        json.dump([s.to_dict() for s in specs], f, indent=2)


def load_manifest(path):
    with open(path) as f:
        return [ShapeSpec.from_dict(d) for d in json.load(f)]
