import numpy as np
import pytest

from tetshape import tetgrid
from tetshape.evalkit import make_sphere, make_torus


@pytest.fixture(scope="session")
def hier_m1_n2():
    return tetgrid.build_hierarchy(1, 2)


@pytest.fixture(scope="session")
def hier_m2_n2():
    return tetgrid.build_hierarchy(2, 2)


@pytest.fixture(scope="session")
def hier_m2_n3():
    return tetgrid.build_hierarchy(2, 3)


@pytest.fixture(scope="session")
def unit_sphere_mesh():
    """Sphere of radius 0.4 centered in the unit cube."""
    return make_sphere(0.4, 3).transformed(1.0, (0.5, 0.5, 0.5))


@pytest.fixture(scope="session")
def unit_torus_mesh():
    return make_torus(0.3, 0.12).transformed(1.0, (0.5, 0.5, 0.5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
