"""Plain-text mesh formats: OBJ triangle meshes, legacy-VTK unstructured
grids, and MEDIT .mesh files for tetrahedra."""

from __future__ import annotations

import numpy as np


class MeshParseError(ValueError):
    """Malformed mesh file."""


def read_obj(path):
    """Read an OBJ file with triangular faces.

    Returns (vertices, faces) as float64/int64 arrays.  Face records may use
    the v/vt/vn syntax; only the vertex index is kept.  Non-triangular faces
    are an error.
    """
    vertices = []
    faces = []
    with open(path, "r") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
                vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif tag == "f":
                idx = [p.split("/")[0] for p in parts[1:]]
                if len(idx) != 3:
                    raise MeshParseError(
                        f"{path}:{lineno}: only triangular faces are supported "
                        f"(got {len(idx)} vertices)"
                    )
                tri = []
                for s in idx:
                    i = int(s)
                    # OBJ indices are 1-based; negatives count from the end
                    tri.append(i - 1 if i > 0 else len(vertices) + i)
                faces.append(tri)
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    fc = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if fc.size and (fc.min() < 0 or fc.max() >= len(v)):
        raise MeshParseError(f"{path}: face index out of range")
    return v, fc


def write_obj(path, vertices, faces) -> None:
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    with open(path, "w") as f:
        for x, y, z in vertices:
            f.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in faces + 1:
            f.write(f"f {a} {b} {c}\n")


def write_vtk_tets(path, vertices, tets, title="tetshape grid") -> None:
    """Legacy-VTK ASCII unstructured grid of tetrahedra (cell type 10)."""
    vertices = np.asarray(vertices, dtype=np.float64)
    tets = np.asarray(tets, dtype=np.int64)
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write(f"{title}\n")
        f.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {len(vertices)} double\n")
        for x, y, z in vertices:
            f.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
        f.write(f"CELLS {len(tets)} {len(tets) * 5}\n")
        for a, b, c, d in tets:
            f.write(f"4 {a} {b} {c} {d}\n")
        f.write(f"CELL_TYPES {len(tets)}\n")
        f.write("\n".join(["10"] * len(tets)))
        f.write("\n")


def write_medit_tets(path, vertices, tets) -> None:
    """MEDIT .mesh file with 1-based tetrahedra."""
    vertices = np.asarray(vertices, dtype=np.float64)
    tets = np.asarray(tets, dtype=np.int64)
    with open(path, "w") as f:
        f.write("MeshVersionFormatted 2\nDimension 3\n")
        f.write(f"Vertices\n{len(vertices)}\n")
        for x, y, z in vertices:
            f.write(f"{x:.17g} {y:.17g} {z:.17g} 0\n")
        f.write(f"Tetrahedra\n{len(tets)}\n")
        for a, b, c, d in tets + 1:
            f.write(f"{a} {b} {c} {d} 0\n")
        f.write("End\n")
