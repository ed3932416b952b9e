"""Tetrahedral-grid neural shape representation toolkit."""

from .tetgrid import (
    TetGrid,
    GridHierarchy,
    build_base_grid,
    build_hierarchy,
    subdivide,
    validate,
    save_grid,
    load_grid,
)
from .shapefields import TriMesh, FieldSet, load_and_normalize, encode_shape
from .evalkit import ShapeSpec, generate, chamfer, variety, build_toy_dataset

__all__ = [
    "TetGrid",
    "GridHierarchy",
    "build_base_grid",
    "build_hierarchy",
    "subdivide",
    "validate",
    "save_grid",
    "load_grid",
    "TriMesh",
    "FieldSet",
    "load_and_normalize",
    "encode_shape",
    "ShapeSpec",
    "generate",
    "chamfer",
    "variety",
    "build_toy_dataset",
]

__version__ = "0.1.0"
