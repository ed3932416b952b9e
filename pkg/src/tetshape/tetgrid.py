"""Conforming tetrahedral grids of the unit cube and their subdivision hierarchy.

The base grid splits each of m^3 axis-aligned cubes into 6 tetrahedra sharing
the cube's main diagonal (Freudenthal/Kuhn decomposition).  Refinement replaces
every tetrahedron by 8 children obtained from edge midpoints, splitting the
interior octahedron along a diagonal fixed by the canonical vertex order.  The
construction is deterministic and self-similar: dihedral angles do not degrade
with level.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

# Sentinel for a missing neighbor (face on the domain boundary).
NONE = -1

# Face opposite canonical vertex s, wound so its normal points out of a
# positively oriented tet.
LOCAL_FACES = np.array([(1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1)], dtype=np.int64)

# Edges in local vertex order; midpoint of edge e gets local label 4 + e.
LOCAL_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)], dtype=np.int64)

# 1-to-8 subdivision in local labels (0..3 corners, 4..9 edge midpoints).
# Corner children first, then the four octahedron children split along the
# diagonal midpoint(v0,v2)-midpoint(v1,v3).  Orders are chosen so every child
# has positive volume (+1/8 of the parent, exactly) and so the diagonal rule
# applied recursively keeps the similarity classes bounded.
CHILD_TABLE = np.array(
    [
        (0, 4, 5, 6),
        (4, 1, 7, 8),
        (5, 7, 2, 9),
        (6, 8, 9, 3),
        (4, 5, 6, 8),
        (7, 5, 4, 8),
        (5, 6, 8, 9),
        (8, 7, 5, 9),
    ],
    dtype=np.int64,
)

GRID_MAGIC = b"TGRD"
GRID_VERSION = 1


class GridError(ValueError):
    """Invalid grid construction parameters or inconsistent grid data."""


class GridFormatError(IOError):
    """Corrupt, truncated, or version-incompatible grid file."""


class GridSizeError(GridError):
    """Requested hierarchy exceeds the configured tetrahedron cap."""


class TetGrid:
    """One level of the tetrahedral grid.

    Attributes
    ----------
    level : int
        Hierarchy level, 1 = coarsest.
    vertices : (V, 3) float64
        Vertex positions in the unit cube.
    tets : (K, 4) int64
        Vertex indices in canonical order (positive signed volume).
    neighbors : (K, 4) int64
        neighbors[k, s] is the tet sharing the face opposite vertex s of
        tet k, or NONE on the domain boundary.
    """

    def __init__(self, level, vertices, tets, neighbors=None):
        self.level = int(level)
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.tets = np.ascontiguousarray(tets, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise GridError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.tets.ndim != 2 or self.tets.shape[1] != 4:
            raise GridError(f"tets must be (K, 4), got {self.tets.shape}")
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= len(self.vertices)):
            raise GridError("tet vertex index out of range")
        if neighbors is None:
            neighbors = build_adjacency(self.tets)
        self.neighbors = np.ascontiguousarray(neighbors, dtype=np.int64)
        if self.neighbors.shape != self.tets.shape:
            raise GridError("neighbors shape must match tets")
        self.centroids = self.vertices[self.tets].mean(axis=1)

    @property
    def num_tets(self) -> int:
        return len(self.tets)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def boundary_mask(self):
        """Per-tet flag: touches the domain boundary (has a NONE neighbor)."""
        return (self.neighbors == NONE).any(axis=1)

    def signed_volumes(self):
        v = self.vertices[self.tets]
        e = v[:, 1:] - v[:, :1]
        return np.linalg.det(e) / 6.0

    def total_volume(self) -> float:
        return float(self.signed_volumes().sum())

    def structurally_equal(self, other: "TetGrid") -> bool:
        return (
            self.level == other.level
            and self.vertices.shape == other.vertices.shape
            and self.tets.shape == other.tets.shape
            and np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.tets, other.tets)
            and np.array_equal(self.neighbors, other.neighbors)
        )


def build_adjacency(tets) -> np.ndarray:
    """Face-adjacency table: slot s holds the tet across the face opposite
    canonical vertex s, or NONE.  Raises if any face is shared by >2 tets."""
    tets = np.asarray(tets, dtype=np.int64)
    K = len(tets)
    neighbors = np.full((K, 4), NONE, dtype=np.int64)
    if K == 0:
        return neighbors
    faces = tets[:, LOCAL_FACES]                     # (K, 4, 3)
    keys = np.sort(faces.reshape(-1, 3), axis=1)     # (4K, 3)
    owner_tet = np.repeat(np.arange(K), 4)
    owner_slot = np.tile(np.arange(4), K)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    sk = keys[order]
    same = np.all(sk[1:] == sk[:-1], axis=1)
    # runs of equal keys: boundaries where `same` is False
    run_starts = np.flatnonzero(np.concatenate(([True], ~same)))
    run_lengths = np.diff(np.concatenate((run_starts, [len(sk)])))
    if (run_lengths > 2).any():
        raise GridError("non-conforming mesh: a face is shared by more than 2 tets")
    pair_starts = run_starts[run_lengths == 2]
    a = order[pair_starts]
    b = order[pair_starts + 1]
    neighbors[owner_tet[a], owner_slot[a]] = owner_tet[b]
    neighbors[owner_tet[b], owner_slot[b]] = owner_tet[a]
    return neighbors


# Axis orders of the 6 path tets per cube and their permutation parity.
_CUBE_PATHS = [
    ((0, 1, 2), 1), ((1, 2, 0), 1), ((2, 0, 1), 1),
    ((0, 2, 1), -1), ((2, 1, 0), -1), ((1, 0, 2), -1),
]


def build_base_grid(m: int) -> TetGrid:
    """Freudenthal grid of the unit cube: m^3 cubes, 6 tets each, all cubes
    sharing the same main-diagonal direction.  K = 6 m^3."""
    m = int(m)
    if m < 1:
        raise GridError(f"cubes-per-axis must be >= 1, got {m}")
    n = m + 1
    ii, jj, kk = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    lattice = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
    vertices = lattice.astype(np.float64) / m

    def vid(p):  # p: (..., 3) integer lattice coords
        return (p[..., 0] * n + p[..., 1]) * n + p[..., 2]

    ci, cj, ck = np.meshgrid(np.arange(m), np.arange(m), np.arange(m), indexing="ij")
    corners = np.stack([ci, cj, ck], axis=-1).reshape(-1, 3)  # cube origins
    tets = np.empty((len(corners) * 6, 4), dtype=np.int64)
    eye = np.eye(3, dtype=np.int64)
    row = 0
    for axes, parity in _CUBE_PATHS:
        p0 = corners
        p1 = p0 + eye[axes[0]]
        p2 = p1 + eye[axes[1]]
        p3 = p2 + eye[axes[2]]
        quad = np.stack([vid(p0), vid(p1), vid(p2), vid(p3)], axis=1)
        if parity < 0:
            quad = quad[:, [2, 1, 0, 3]]  # swap to restore positive volume
        tets[row : row + len(corners)] = quad
        row += len(corners)
    # deterministic ordering: sort tets by (cube index, path index) is already
    # fixed by construction; reorder to group by cube for locality
    order = np.lexsort((np.tile(np.arange(6), len(corners)),
                        np.repeat(np.arange(len(corners)), 6)))
    grouped = np.empty_like(tets)
    for p in range(6):
        grouped[p::6] = tets[p * len(corners) : (p + 1) * len(corners)]
    tets = grouped
    del order
    return TetGrid(1, vertices, tets)


def subdivide(grid: TetGrid):
    """Split every tet into 8 via edge midpoints.  Returns the refined grid
    and the (K, 8) child map; children of parent k are rows 8k..8k+7."""
    V = grid.num_vertices
    K = grid.num_tets
    edges = grid.tets[:, LOCAL_EDGES]                    # (K, 6, 2)
    ekeys = np.sort(edges.reshape(-1, 2), axis=1)
    uniq, inverse = np.unique(ekeys, axis=0, return_inverse=True)
    mid_vertices = grid.vertices[uniq].mean(axis=1)
    vertices = np.concatenate([grid.vertices, mid_vertices], axis=0)
    # local labels 0..3 -> original corners, 4..9 -> edge midpoints
    local2global = np.empty((K, 10), dtype=np.int64)
    local2global[:, :4] = grid.tets
    local2global[:, 4:] = V + inverse.reshape(K, 6)
    children = local2global[:, CHILD_TABLE]              # (K, 8, 4)
    tets = children.reshape(K * 8, 4)
    child_map = np.arange(K * 8, dtype=np.int64).reshape(K, 8)
    return TetGrid(grid.level + 1, vertices, tets), child_map


@dataclass
class GridHierarchy:
    """Grids T^(1)..T^(N) with supercell maps and cached geometric operators."""

    grids: list
    child_maps: list   # child_maps[n]: (K^(n+1-1), 8) parents at level n+1 -> children
    parent_maps: list  # parent_maps[n]: (K^(n+2-1),) child at level n+2 -> parent
    _incidence_cache: dict = field(default_factory=dict, repr=False)
    _vertex_avg_cache: dict = field(default_factory=dict, repr=False)
    _upsample_cache: dict = field(default_factory=dict, repr=False)

    @property
    def num_levels(self) -> int:
        return len(self.grids)

    @property
    def finest(self) -> TetGrid:
        return self.grids[-1]

    def grid(self, level: int) -> TetGrid:
        return self.grids[level - 1]

    def child_map(self, level: int):
        """Children at `level`+1 of each tet at `level`."""
        return self.child_maps[level - 1]

    def parent_map(self, level: int):
        """Parent at `level`-1 of each tet at `level`."""
        return self.parent_maps[level - 2]

    def vertex_incidence(self, level: int):
        """CSR-style incidence: (offsets, tet_indices) such that the tets
        incident to vertex v are tet_indices[offsets[v]:offsets[v+1]]."""
        if level not in self._incidence_cache:
            g = self.grid(level)
            flat = g.tets.ravel()
            order = np.argsort(flat, kind="stable")
            counts = np.bincount(flat, minlength=g.num_vertices)
            offsets = np.concatenate(([0], np.cumsum(counts)))
            self._incidence_cache[level] = (offsets, order // 4)
        return self._incidence_cache[level]

    def vertex_average_matrix(self, level: int, eps: float = 1e-12):
        """Sparse (V, K) matrix averaging per-tet vectors onto vertices with
        inverse centroid-distance weights normalized to sum 1 per vertex."""
        if level not in self._vertex_avg_cache:
            g = self.grid(level)
            offsets, tet_idx = self.vertex_incidence(level)
            vert_idx = np.repeat(np.arange(g.num_vertices), np.diff(offsets))
            d = np.linalg.norm(g.vertices[vert_idx] - g.centroids[tet_idx], axis=1)
            w = 1.0 / np.maximum(d, eps)
            sums = np.add.reduceat(w, offsets[:-1])
            w = w / sums[vert_idx]
            mat = sparse.csr_matrix(
                (w, (vert_idx, tet_idx)), shape=(g.num_vertices, g.num_tets)
            )
            self._vertex_avg_cache[level] = mat
        return self._vertex_avg_cache[level]

    def upsample_matrix(self, level: int, eps: float = 1e-12, include_parent: bool = True):
        """Sparse (K^(level), K^(level-1)) interpolation matrix: each child tet
        receives an inverse-centroid-distance weighted average of its parent
        (optionally) and the parent's face neighbors; weights sum to 1."""
        key = (level, include_parent)
        if key not in self._upsample_cache:
            fine = self.grid(level)
            coarse = self.grid(level - 1)
            parent = self.parent_map(level)
            sources = [parent[:, None]] if include_parent else []
            sources.append(coarse.neighbors[parent])
            src = np.concatenate(sources, axis=1)            # (Kf, 4 or 5)
            valid = src != NONE
            child_idx = np.repeat(np.arange(fine.num_tets), valid.sum(axis=1))
            src_idx = src[valid]
            d = np.linalg.norm(
                coarse.centroids[src_idx] - fine.centroids[child_idx], axis=1
            )
            w = 1.0 / np.maximum(d, eps)
            sums = np.bincount(child_idx, weights=w, minlength=fine.num_tets)
            w = w / sums[child_idx]
            mat = sparse.csr_matrix(
                (w, (child_idx, src_idx)), shape=(fine.num_tets, coarse.num_tets)
            )
            self._upsample_cache[key] = mat
        return self._upsample_cache[key]


def build_hierarchy(m: int, levels: int, max_tets: int = 2**24) -> GridHierarchy:
    """Base grid plus `levels`-1 subdivisions with parent/child maps."""
    levels = int(levels)
    if levels < 1:
        raise GridError(f"levels must be >= 1, got {levels}")
    finest_k = 6 * int(m) ** 3 * 8 ** (levels - 1)
    if finest_k > max_tets:
        raise GridSizeError(
            f"finest level would have {finest_k} tets, exceeding the cap of {max_tets}"
        )
    grids = [build_base_grid(m)]
    child_maps = []
    parent_maps = []
    for _ in range(levels - 1):
        fine, cmap = subdivide(grids[-1])
        grids.append(fine)
        child_maps.append(cmap)
        pmap = np.empty(fine.num_tets, dtype=np.int64)
        pmap[cmap.ravel()] = np.repeat(np.arange(len(cmap)), 8)
        parent_maps.append(pmap)
    return GridHierarchy(grids, child_maps, parent_maps)


@dataclass
class ValidationReport:
    checks: dict
    total_volume: float
    messages: list

    @property
    def all_passed(self) -> bool:
        return all(self.checks.values())

    def __str__(self):
        lines = [
            f"  [{'PASS' if ok else 'FAIL'}] {name}" for name, ok in self.checks.items()
        ]
        lines.append(f"  total volume = {self.total_volume:.15f}")
        lines.extend("  ! " + m for m in self.messages)
        return "\n".join(lines)


def validate(grid: TetGrid, expected_volume: float = 1.0, vol_tol: float = 1e-12) -> ValidationReport:
    """Check conformity, adjacency symmetry, positive volumes, and total volume.

    Failures are reported, never raised."""
    checks = {}
    messages = []

    vols = grid.signed_volumes()
    checks["positive_volumes"] = bool((vols > 0).all())
    if not checks["positive_volumes"]:
        messages.append(f"{int((vols <= 0).sum())} tets with non-positive volume")

    total = float(vols.sum())
    checks["total_volume"] = abs(total - expected_volume) <= vol_tol
    if not checks["total_volume"]:
        messages.append(f"total volume {total!r} != {expected_volume!r}")

    # adjacency symmetry: j in neighbors(k) <=> k in neighbors(j)
    nb = grid.neighbors
    K = grid.num_tets
    sym_ok = True
    rows, slots = np.nonzero(nb != NONE)
    js = nb[rows, slots]
    if (js < 0).any() or (js >= K).any():
        sym_ok = False
        messages.append("neighbor index out of range")
    else:
        back = (nb[js] == rows[:, None]).any(axis=1)
        if not back.all():
            sym_ok = False
            messages.append(f"{int((~back).sum())} asymmetric neighbor entries")
    checks["adjacency_symmetric"] = bool(sym_ok)

    # conformity + consistency of the declared adjacency with face sharing
    try:
        rebuilt = build_adjacency(grid.tets)
        conforming = True
    except GridError as exc:
        rebuilt = None
        conforming = False
        messages.append(str(exc))
    checks["conforming"] = conforming
    if rebuilt is not None:
        match = bool(np.array_equal(rebuilt, nb))
        checks["adjacency_matches_faces"] = match
        if not match:
            messages.append("stored neighbor table disagrees with face sharing")
        interior = ~(rebuilt == NONE).any(axis=1)
        checks["interior_tets_have_4_neighbors"] = bool(
            (np.count_nonzero(rebuilt[interior] != NONE, axis=1) == 4).all()
        )
    else:
        checks["adjacency_matches_faces"] = False
        checks["interior_tets_have_4_neighbors"] = False

    return ValidationReport(checks=checks, total_volume=total, messages=messages)


def min_dihedral_angle(grid: TetGrid) -> float:
    """Minimum dihedral angle over all tets, in degrees."""
    v = grid.vertices[grid.tets]                        # (K, 4, 3)
    normals = np.empty((grid.num_tets, 4, 3))
    for s in range(4):
        i, j, k = LOCAL_FACES[s]
        n = np.cross(v[:, j] - v[:, i], v[:, k] - v[:, i])
        normals[:, s] = n / np.linalg.norm(n, axis=1, keepdims=True)
    worst = np.inf
    for s in range(4):
        for t in range(s + 1, 4):
            c = np.einsum("kd,kd->k", normals[:, s], normals[:, t])
            ang = np.pi - np.arccos(np.clip(c, -1.0, 1.0))
            worst = min(worst, float(ang.min()))
    return float(np.degrees(worst))


def save_grid(grid: TetGrid, path) -> None:
    """Binary format: magic, version, level, counts, then little-endian arrays
    (vertices f64, tets u32, neighbors i64 with -1 sentinel)."""
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<IIQQ", GRID_VERSION, grid.level,
                            grid.num_vertices, grid.num_tets))
        f.write(grid.vertices.astype("<f8").tobytes())
        f.write(grid.tets.astype("<u4").tobytes())
        f.write(grid.neighbors.astype("<i8").tobytes())


def load_grid(path) -> TetGrid:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[:4] != GRID_MAGIC:
        raise GridFormatError(f"{path}: not a tetrahedral grid file (bad magic)")
    header = struct.calcsize("<IIQQ")
    if len(data) < 4 + header:
        raise GridFormatError(f"{path}: truncated header")
    version, level, nv, nt = struct.unpack_from("<IIQQ", data, 4)
    if version != GRID_VERSION:
        raise GridFormatError(
            f"{path}: unsupported grid format version {version} (expected {GRID_VERSION})"
        )
    off = 4 + header
    need = off + nv * 24 + nt * 16 + nt * 32
    if len(data) != need:
        raise GridFormatError(f"{path}: truncated file ({len(data)} bytes, need {need})")
    vertices = np.frombuffer(data, dtype="<f8", count=nv * 3, offset=off).reshape(nv, 3)
    off += nv * 24
    tets = np.frombuffer(data, dtype="<u4", count=nt * 4, offset=off).reshape(nt, 4)
    off += nt * 16
    neighbors = np.frombuffer(data, dtype="<i8", count=nt * 4, offset=off).reshape(nt, 4)
    return TetGrid(level, vertices.copy(), tets.astype(np.int64), neighbors.copy())


def infer_base_resolution(grid: TetGrid) -> int:
    """Recover the cubes-per-axis m of the base grid this grid refines."""
    k_base = grid.num_tets / 8 ** (grid.level - 1)
    m = round((k_base / 6.0) ** (1.0 / 3.0))
    if 6 * m**3 * 8 ** (grid.level - 1) != grid.num_tets:
        raise GridError(
            f"grid with K={grid.num_tets} at level {grid.level} is not a "
            "subdivided Freudenthal cube grid"
        )
    return m
