import numpy as np
import pytest
import torch

from scenemocap.body import synthetic_body
from scenemocap.camera import CameraIntrinsics

torch.set_default_dtype(torch.float64)


@pytest.fixture(scope="session")
def body():
    return synthetic_body()


@pytest.fixture(scope="session")
def tiny_body():
    # small mesh keeps finite-difference sweeps cheap
    return synthetic_body(segments=3, rings=2)


@pytest.fixture
def cam():
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=32.0, cy=24.0, width=64, height=48)


def rand_pose(rng, k=24, scale=0.15):
    return rng.normal(0.0, scale, size=(k, 3))


def central_diff(f, x, step=1e-5):
    """Componentwise central finite differences of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * step)
    return g
