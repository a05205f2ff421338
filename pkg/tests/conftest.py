import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from softsim import meshgen
from softsim.bvh import AabbTree


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Touch every jit kernel once so compile time never lands in a timed test."""
    mesh = meshgen.random_tet_soup(8, seed=1)
    tree = AabbTree(mesh.tets, mesh.pos)
    tree.refit(mesh.pos)
    pts = mesh.pos[:4] + 1e-3
    tree.query_points_in_tets(pts, np.arange(4))
    sphere = meshgen.icosphere(1.0, 0)
    tri_tree = AabbTree(sphere.triangles, sphere.positions)
    tri_tree.query_ray(pts, np.tile([0.0, 0.0, 1.0], (4, 1)))
    tri_tree.query_closest(pts)
    from softsim.bvh import WindingTree
    WindingTree(sphere.positions, sphere.triangles).winding(pts)
    from softsim import kernels
    rng = np.random.default_rng(0)
    shapes = rng.normal(size=(3, 3, 4))
    kernels.fit_rotations(shapes - shapes.mean(axis=2, keepdims=True),
                          shapes - shapes.mean(axis=2, keepdims=True))


@pytest.fixture()
def rng():
    return np.random.default_rng(42)


@pytest.fixture()
def small_cube():
    return meshgen.cube_with_core(4, cell=0.01, core=2)


def pytest_report_header(config):
    import softsim
    return f"softsim backend: {softsim.BACKEND}"
