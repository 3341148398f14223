import numpy as np
import pytest

from catasplat.geometry import Camera, look_at


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_camera(rng: np.random.Generator, width: int = 32, height: int = 24) -> Camera:
    return Camera(
        rng.normal(size=3),
        random_rotation(rng),
        rng.uniform(20, 60),
        rng.uniform(20, 60),
        rng.uniform(0.3, 0.7) * width,
        rng.uniform(0.3, 0.7) * height,
        width,
        height,
    )


def point_in_front(rng: np.random.Generator, cam: Camera, zmin: float = 0.5, zmax: float = 4.0) -> np.ndarray:
    q = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), 1.0]) * rng.uniform(zmin, zmax)
    return q @ cam.rotation + cam.position


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def identity_camera():
    return Camera(np.zeros(3), np.eye(3), 100.0, 100.0, 50.0, 50.0, 100, 100)


@pytest.fixture
def unit_camera():
    return Camera(np.zeros(3), np.eye(3), 1.0, 1.0, 0.0, 0.0, 8, 8)


@pytest.fixture
def orbit_camera():
    return look_at((3.0, 0.5, 1.0), (0.0, 0.0, 0.0), width=48, height=40)
