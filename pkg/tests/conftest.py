import numpy as np
import pytest

from meshtrack import grid_mesh, sphere_section_mesh


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def quad_grid():
    # 5x5 vertex grid, 32 triangles
    return grid_mesh(5, 5)


@pytest.fixture(scope="session")
def sphere_patch():
    return sphere_section_mesh(n_target=400)
