import numpy as np
import pytest

from deformcap import rasterizer, synthgen
from deformcap.contact import build_aabb, points_inside, ray_first_hit


@pytest.fixture(scope="session")
def rig4():
    return synthgen.make_rig(4, 800.0)


@pytest.fixture(scope="session")
def press_scene():
    """Short press sequence shared by contact/deform/pipeline tests."""
    return synthgen.make_press_sequence(6, seed=11, n_views=4)


@pytest.fixture(scope="session", autouse=True)
def _warm_numba_kernels(rig4):
    # Compile the jit kernels once on tiny inputs so individual test timings
    # measure the algorithms, not compilation.
    tri = synthgen.icosphere(50.0, 0)
    rasterizer.rasterize([(tri, "object")], rig4[0].scaled(8))
    tree = build_aabb(tri)
    points_inside(tree, np.zeros((1, 3)))
    ray_first_hit(tree, np.zeros(3), np.array([1.0, 0.0, 0.0]))
