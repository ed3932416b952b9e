"""Encoding watertight triangle meshes into per-tet occupancy and deformation
fields over the finest grid level.

Occupancy is the generalized winding number at tet centroids thresholded at
0.5; deformation is the vector from each centroid to its closest surface
point, averaged onto vertices with inverse centroid-distance weights.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .aabb import AabbTree
from .meshio import read_obj
from .tetgrid import GridHierarchy, TetGrid

FIELD_MAGIC = b"TFLD"
FIELD_VERSION = 1

DIST_EPS = 1e-12          # clamp for all inverse-distance weights
SURFACE_NUDGE = 1e-9      # perturbation for centroids sitting exactly on the surface


class FieldFormatError(IOError):
    """Corrupt, truncated, or version-incompatible field file."""


class TriMesh:
    """Triangle surface mesh with a lazily built bounding-volume tree."""

    def __init__(self, vertices, faces):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError(f"faces must be (F, 3), got {self.faces.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        self._tree = None

    @classmethod
    def from_obj(cls, path) -> "TriMesh":
        return cls(*read_obj(path))

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    @property
    def tree(self) -> AabbTree:
        if self._tree is None:
            self._tree = AabbTree(self.vertices, self.faces)
        return self._tree

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def face_normals(self, normalized=True):
        tri = self.vertices[self.faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        if normalized:
            norms = np.linalg.norm(n, axis=1, keepdims=True)
            n = n / np.where(norms == 0.0, 1.0, norms)
        return n

    def face_areas(self):
        tri = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(
            np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
        )

    def is_watertight(self) -> bool:
        """Every undirected edge shared by exactly two faces."""
        if self.is_empty:
            return False
        edges = self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        edges = np.sort(edges, axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return bool((counts == 2).all())

    def transformed(self, scale=1.0, offset=(0.0, 0.0, 0.0)) -> "TriMesh":
        return TriMesh(self.vertices * scale + np.asarray(offset, dtype=np.float64),
                       self.faces)


def normalize_mesh(mesh: TriMesh, margin: float = 0.05) -> TriMesh:
    """Uniformly scale and translate so the bounding box is centered in
    [margin, 1-margin]^3.  A degenerate axis is carried along by the scale of
    the largest extent; a zero-extent mesh is only recentered."""
    lo, hi = mesh.bounds()
    extent = hi - lo
    max_extent = float(extent.max())
    target = 1.0 - 2.0 * margin
    scale = target / max_extent if max_extent > 0.0 else 1.0
    center = (lo + hi) / 2.0
    offset = 0.5 - center * scale
    return mesh.transformed(scale, offset)


def load_and_normalize(path, margin: float = 0.05) -> TriMesh:
    return normalize_mesh(TriMesh.from_obj(path), margin)


def winding_number(mesh: TriMesh, points) -> np.ndarray:
    """Generalized winding number: signed solid angle of every face summed
    and divided by 4*pi.  Approximately 1 inside and 0 outside a watertight
    surface."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if mesh.is_empty:
        return np.zeros(len(points))
    tri = mesh.vertices[mesh.faces]                      # (F, 3, 3)
    if _kernels.HAVE_NUMBA:
        total = _kernels.winding_sum(
            np.ascontiguousarray(points),
            np.ascontiguousarray(tri[:, 0]),
            np.ascontiguousarray(tri[:, 1]),
            np.ascontiguousarray(tri[:, 2]),
        )
        return total / (2.0 * np.pi)
    total = np.zeros(len(points))
    # chunk queries so the (q, F) intermediates stay modest
    chunk = max(1, int(4e6) // max(len(tri), 1))
    for s in range(0, len(points), chunk):
        p = points[s : s + chunk]                        # (q, 3)
        a = tri[None, :, 0] - p[:, None]                 # (q, F, 3)
        b = tri[None, :, 1] - p[:, None]
        c = tri[None, :, 2] - p[:, None]
        la = np.linalg.norm(a, axis=2)
        lb = np.linalg.norm(b, axis=2)
        lc = np.linalg.norm(c, axis=2)
        det = np.einsum("qfd,qfd->qf", a, np.cross(b, c))
        denom = (
            la * lb * lc
            + np.einsum("qfd,qfd->qf", a, b) * lc
            + np.einsum("qfd,qfd->qf", b, c) * la
            + np.einsum("qfd,qfd->qf", c, a) * lb
        )
        total[s : s + chunk] = np.arctan2(det, denom).sum(axis=1)
    return total / (2.0 * np.pi)


def closest_point(mesh: TriMesh, points):
    """Exact closest surface points via the bounding-volume tree.

    Returns (points_on_mesh (Q, 3), distances (Q,)).
    """
    if mesh.is_empty:
        raise ValueError("closest_point on an empty mesh")
    pts, dist, _ = mesh.tree.closest_points(points)
    return pts, dist


def compute_occupancy(mesh: TriMesh, grid: TetGrid, threshold: float = 0.5) -> np.ndarray:
    """Per-tet occupancy bit: winding number at the centroid exceeds the
    threshold.  Centroids landing exactly on the surface are nudged along the
    closest face normal before deciding."""
    if mesh.is_empty:
        return np.zeros(grid.num_tets, dtype=np.uint8)
    if not mesh.is_watertight():
        warnings.warn(
            "mesh is not watertight; occupancy uses the generalized winding "
            "number and may be fractional near holes",
            stacklevel=2,
        )
    w = winding_number(mesh, grid.centroids)
    ambiguous = np.abs(w - threshold) < 0.25
    if ambiguous.any():
        pts = grid.centroids[ambiguous]
        _, dist, face = mesh.tree.closest_points(pts)
        on_surface = dist < SURFACE_NUDGE
        if on_surface.any():
            normals = mesh.face_normals()[face[on_surface]]
            nudged = pts[on_surface] + SURFACE_NUDGE * normals
            w_idx = np.flatnonzero(ambiguous)[on_surface]
            w[w_idx] = winding_number(mesh, nudged)
    return (w > threshold).astype(np.uint8)


def compute_tet_deformation(mesh: TriMesh, grid: TetGrid) -> np.ndarray:
    """Vector from each tet centroid to its closest point on the surface."""
    pts, _ = closest_point(mesh, grid.centroids)
    return pts - grid.centroids


def tet_to_vertex_deformation(hierarchy: GridHierarchy, tet_deformation, level=None) -> np.ndarray:
    """Average per-tet deformations onto vertices, weighted by inverse
    centroid distance (weights normalized to sum 1 per vertex)."""
    if level is None:
        level = hierarchy.num_levels
    W = hierarchy.vertex_average_matrix(level)
    return W @ np.asarray(tet_deformation, dtype=np.float64)


@dataclass
class FieldSet:
    """The shape representation over the finest grid: per-tet occupancy plus
    per-tet and per-vertex deformation vectors."""

    occupancy: np.ndarray           # (K,) {0,1} ground truth or [0,1] predicted
    tet_deformation: np.ndarray     # (K, 3)
    vertex_deformation: np.ndarray  # (V, 3)

    def __post_init__(self):
        self.occupancy = np.asarray(self.occupancy, dtype=np.float64).ravel()
        self.tet_deformation = np.asarray(self.tet_deformation, dtype=np.float64)
        self.vertex_deformation = np.asarray(self.vertex_deformation, dtype=np.float64)

    @property
    def num_tets(self) -> int:
        return len(self.occupancy)

    def occupancy_bits(self, tau: float = 0.5) -> np.ndarray:
        return (self.occupancy > tau).astype(np.uint8)

    def as_feature_array(self) -> np.ndarray:
        """(K, 4) network input: occupancy plus the tet deformation."""
        return np.concatenate(
            [self.occupancy[:, None], self.tet_deformation], axis=1
        )


def encode_shape(mesh: TriMesh, hierarchy: GridHierarchy) -> FieldSet:
    """Full ground-truth encoding at the finest level."""
    grid = hierarchy.finest
    occ = compute_occupancy(mesh, grid).astype(np.float64)
    if mesh.is_empty:
        tet_def = np.zeros((grid.num_tets, 3))
    else:
        tet_def = compute_tet_deformation(mesh, grid)
    vert_def = tet_to_vertex_deformation(hierarchy, tet_def)
    return FieldSet(occ, tet_def, vert_def)


def save_fields(fields: FieldSet, path) -> None:
    """Binary format: magic, version, K, V, bit-packed occupancy, f32
    deformation arrays."""
    occ_bits = fields.occupancy_bits()
    with open(path, "wb") as f:
        f.write(FIELD_MAGIC)
        f.write(struct.pack("<IQQ", FIELD_VERSION, fields.num_tets,
                            len(fields.vertex_deformation)))
        f.write(np.packbits(occ_bits).tobytes())
        f.write(fields.tet_deformation.astype("<f4").tobytes())
        f.write(fields.vertex_deformation.astype("<f4").tobytes())


def load_fields(path) -> FieldSet:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[:4] != FIELD_MAGIC:
        raise FieldFormatError(f"{path}: not a field file (bad magic)")
    header = struct.calcsize("<IQQ")
    if len(data) < 4 + header:
        raise FieldFormatError(f"{path}: truncated header")
    version, K, V = struct.unpack_from("<IQQ", data, 4)
    if version != FIELD_VERSION:
        raise FieldFormatError(
            f"{path}: unsupported field format version {version} (expected {FIELD_VERSION})"
        )
    off = 4 + header
    nbytes_occ = (K + 7) // 8
    need = off + nbytes_occ + K * 12 + V * 12
    if len(data) != need:
        raise FieldFormatError(f"{path}: truncated file ({len(data)} bytes, need {need})")
    occ = np.unpackbits(
        np.frombuffer(data, dtype=np.uint8, count=nbytes_occ, offset=off), count=K
    ).astype(np.float64)
    off += nbytes_occ
    tet_def = np.frombuffer(data, dtype="<f4", count=K * 3, offset=off).reshape(K, 3)
    off += K * 12
    vert_def = np.frombuffer(data, dtype="<f4", count=V * 3, offset=off).reshape(V, 3)
    return FieldSet(occ, tet_def.astype(np.float64), vert_def.astype(np.float64))
