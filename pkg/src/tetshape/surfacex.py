"""Turning occupancy/deformation fields back into meshes.

The boundary surface is every grid face between an occupied and an
unoccupied (or missing) tet, wound outward.  Vertices are then displaced by
the deformation field, optionally relaxed with deformation-weighted Laplacian
smoothing, and spurious surface tets can be dropped by thresholding their
deformation magnitude against a dataset statistic.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .meshio import write_medit_tets, write_obj, write_vtk_tets
from .tetgrid import LOCAL_FACES, NONE, TetGrid


@dataclass
class ExtractedSurface:
    vertices: np.ndarray            # (Vs, 3)
    faces: np.ndarray               # (Fs, 3) outward-oriented
    vertex_map: np.ndarray          # (Vs,) index into the grid's vertex array
    vertex_deformation: np.ndarray = None  # (Vs, 3), carried when known

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def edges(self):
        e = self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        return np.sort(e, axis=1)

    def copy(self) -> "ExtractedSurface":
        return ExtractedSurface(
            self.vertices.copy(),
            self.faces.copy(),
            self.vertex_map.copy(),
            None if self.vertex_deformation is None else self.vertex_deformation.copy(),
        )


def threshold_occupancy(probabilities, tau: float = 0.5) -> np.ndarray:
    """Bit = probability strictly greater than tau."""
    return (np.asarray(probabilities) > tau).astype(np.uint8)


def extract_surface(grid: TetGrid, occupancy, vertex_deformation=None) -> ExtractedSurface:
    """All faces of occupied tets whose opposite side is unoccupied or the
    domain exterior, outward-oriented, with vertices deduplicated.  Output
    order is fixed: tet index ascending, then face slot."""
    occ = np.asarray(occupancy).astype(bool).ravel()
    if len(occ) != grid.num_tets:
        raise ValueError(f"occupancy length {len(occ)} != K {grid.num_tets}")
    nb = grid.neighbors
    # padded lookup so sentinel neighbors read as unoccupied
    occ_pad = np.concatenate([occ, [False]])
    nb_occ = occ_pad[np.where(nb == NONE, grid.num_tets, nb)]   # (K, 4)
    emit = occ[:, None] & ~nb_occ                               # (K, 4)
    tet_idx, slot = np.nonzero(emit)
    faces_global = grid.tets[tet_idx[:, None], LOCAL_FACES[slot]]  # (F, 3)
    used, faces = np.unique(faces_global, return_inverse=True)
    faces = faces.reshape(-1, 3)
    vdef = None
    if vertex_deformation is not None:
        vdef = np.asarray(vertex_deformation, dtype=np.float64)[used]
    return ExtractedSurface(
        vertices=grid.vertices[used].copy(),
        faces=faces.astype(np.int64),
        vertex_map=used.astype(np.int64),
        vertex_deformation=vdef,
    )


def surface_tet_mask(grid: TetGrid, occupancy) -> np.ndarray:
    """Occupied tets with at least one unoccupied face neighbor (domain
    boundary does not count)."""
    occ = np.asarray(occupancy).astype(bool).ravel()
    nb = grid.neighbors
    occ_pad = np.concatenate([occ, [True]])  # sentinel reads occupied here
    nb_occ = occ_pad[np.where(nb == NONE, grid.num_tets, nb)]
    return occ & (~nb_occ).any(axis=1)


def interior_tet_mask(grid: TetGrid, occupancy) -> np.ndarray:
    """Occupied tets that contribute no boundary faces at all: every face
    neighbor exists and is occupied."""
    occ = np.asarray(occupancy).astype(bool).ravel()
    nb = grid.neighbors
    occ_pad = np.concatenate([occ, [False]])
    nb_occ = occ_pad[np.where(nb == NONE, grid.num_tets, nb)]
    return occ & nb_occ.all(axis=1)


def compute_mu(fieldsets, grid: TetGrid) -> float:
    """Dataset statistic for the deformation filter: the mean, over shapes,
    of the mean deformation norm of that shape's surface tets."""
    if not fieldsets:
        raise ValueError("compute_mu needs a nonempty dataset")
    means = []
    for fs in fieldsets:
        mask = surface_tet_mask(grid, fs.occupancy_bits())
        if not mask.any():
            warnings.warn("shape with no surface tets skipped in mu", stacklevel=2)
            continue
        norms = np.linalg.norm(fs.tet_deformation[mask], axis=1)
        means.append(float(norms.mean()))
    if not means:
        raise ValueError("no shape in the dataset has surface tets")
    return float(np.mean(means))


def deformation_filter(grid: TetGrid, occupancy, tet_deformation,
                       mu: float, gamma: float = 4.0) -> np.ndarray:
    """Drop occupied surface tets whose deformation norm exceeds gamma*mu.
    Applied once; newly exposed tets are not re-examined."""
    if mu <= 0.0:
        raise ValueError(f"mu must be positive, got {mu}")
    occ = np.asarray(occupancy).astype(np.uint8).ravel().copy()
    mask = surface_tet_mask(grid, occ)
    norms = np.linalg.norm(np.asarray(tet_deformation), axis=1)
    occ[mask & (norms > gamma * mu)] = 0
    return occ


def apply_deformation(surface: ExtractedSurface, vertex_deformation=None) -> ExtractedSurface:
    """Displace the surface vertices by the deformation field; connectivity
    is unchanged.  Uses the deformation carried on the surface when no full
    per-grid-vertex field is given."""
    out = surface.copy()
    if vertex_deformation is not None:
        d = np.asarray(vertex_deformation, dtype=np.float64)
        d = d[surface.vertex_map] if len(d) != surface.num_vertices else d
        out.vertex_deformation = d
    if out.vertex_deformation is None:
        raise ValueError("no deformation available to apply")
    out.vertices = out.vertices + out.vertex_deformation
    return out


def _vertex_neighbors(surface: ExtractedSurface):
    """Unique undirected edges as CSR-style (offsets, neighbor indices)."""
    edges = np.unique(surface.edges(), axis=0)
    both = np.concatenate([edges, edges[:, ::-1]], axis=0)
    order = np.argsort(both[:, 0], kind="stable")
    both = both[order]
    counts = np.bincount(both[:, 0], minlength=surface.num_vertices)
    offsets = np.concatenate(([0], np.cumsum(counts)))
    return offsets, both[:, 1]


def weighted_laplacian_smooth(surface: ExtractedSurface, beta: float = 0.5,
                              iterations: int = 1) -> ExtractedSurface:
    """v <- beta*v + (1-beta) * weighted average of edge neighbors, with
    weights |cos(D_i, D_j)| normalized per vertex; degenerate weights fall
    back to a uniform average."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    if surface.vertex_deformation is None:
        raise ValueError("smoothing needs per-vertex deformations on the surface")
    out = surface.copy()
    if surface.is_empty or iterations == 0:
        return out
    offsets, nbr = _vertex_neighbors(surface)
    src = np.repeat(np.arange(surface.num_vertices), np.diff(offsets))

    D = out.vertex_deformation
    norms = np.linalg.norm(D, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    unit = D / safe[:, None]
    cos = np.abs(np.einsum("md,md->m", unit[src], unit[nbr]))
    cos[(norms[src] == 0.0) | (norms[nbr] == 0.0)] = 0.0
    sums = np.bincount(src, weights=cos, minlength=surface.num_vertices)
    degenerate = sums[src] <= 0.0
    w = np.where(degenerate, 1.0, cos)
    sums = np.bincount(src, weights=w, minlength=surface.num_vertices)
    w = w / sums[src]

    v = out.vertices
    for _ in range(iterations):
        avg = np.zeros_like(v)
        np.add.at(avg, src, w[:, None] * v[nbr])
        isolated = np.diff(offsets) == 0
        avg[isolated] = v[isolated]
        v = beta * v + (1.0 - beta) * avg
    out.vertices = v
    return out


def laplacian_energy(surface: ExtractedSurface) -> float:
    """Sum over vertices of squared distance to the unweighted neighbor mean."""
    if surface.is_empty:
        return 0.0
    offsets, nbr = _vertex_neighbors(surface)
    src = np.repeat(np.arange(surface.num_vertices), np.diff(offsets))
    mean = np.zeros_like(surface.vertices)
    np.add.at(mean, src, surface.vertices[nbr])
    deg = np.maximum(np.diff(offsets), 1)
    mean /= deg[:, None]
    has = np.diff(offsets) > 0
    d = surface.vertices[has] - mean[has]
    return float((d**2).sum())


def euler_characteristic(surface: ExtractedSurface) -> int:
    """V - E + F over the extracted complex (2 for a sphere, 0 for a torus)."""
    if surface.is_empty:
        return 0
    referenced = np.unique(surface.faces)
    E = len(np.unique(surface.edges(), axis=0))
    return int(len(referenced) - E + surface.num_faces)


def is_closed(surface: ExtractedSurface) -> bool:
    """No odd edges: every edge bounds an even number (>= 2) of faces."""
    if surface.is_empty:
        return False
    _, counts = np.unique(surface.edges(), axis=0, return_counts=True)
    return bool((counts % 2 == 0).all())


def enclosed_volume(surface: ExtractedSurface) -> float:
    """Signed volume from the divergence theorem over the oriented faces."""
    if surface.is_empty:
        return 0.0
    tri = surface.vertices[surface.faces]
    return float(np.einsum("fd,fd->f", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)


def export_surface_obj(surface: ExtractedSurface, path) -> None:
    write_obj(path, surface.vertices, surface.faces)


def export_tet_mesh(grid: TetGrid, occupancy, path, vertex_deformation=None,
                    fmt: str = None, ensure_positive: bool = False):
    """Write every occupied tet, with surface vertices displaced by the
    deformation field and interior vertices left on the grid.

    With ensure_positive, displacements on the vertices of inverted tets are
    repeatedly halved until every exported tet has positive volume (at zero
    displacement the grid tets are positive, so this terminates).  Returns
    the indices of exported tets whose final volume is non-positive.
    """
    occ = np.asarray(occupancy).astype(bool).ravel()
    keep = np.flatnonzero(occ)
    tets = grid.tets[keep]
    used, local = np.unique(tets, return_inverse=True)
    local = local.reshape(-1, 4)
    base = grid.vertices[used]
    disp = np.zeros_like(base)
    if vertex_deformation is not None and len(keep):
        surf = extract_surface(grid, occ)
        d = np.asarray(vertex_deformation, dtype=np.float64)
        on_surface = np.isin(used, surf.vertex_map)
        disp[on_surface] = d[used[on_surface]]
    points = base + disp
    if ensure_positive and len(keep):
        for _ in range(80):
            v = points[local]
            bad = np.linalg.det(v[:, 1:] - v[:, :1]) / 6.0 <= 0.0
            if not bad.any():
                break
            shrink = np.unique(local[bad])
            disp[shrink] *= 0.5
            points = base + disp
    if fmt is None:
        name = str(path).lower()
        fmt = "medit" if name.endswith(".mesh") else "vtk"
    if fmt == "vtk":
        write_vtk_tets(path, points, local, title="occupied tetrahedra")
    elif fmt == "medit":
        write_medit_tets(path, points, local)
    else:
        raise ValueError(f"unknown tet-mesh format {fmt!r}")
    if len(keep) == 0:
        return np.empty(0, dtype=np.int64)
    v = points[local]
    vols = np.linalg.det(v[:, 1:] - v[:, :1]) / 6.0
    return keep[vols <= 0.0]
