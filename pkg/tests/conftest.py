import numpy as np
import pytest

from viewsync import CameraModel, ScenePlaneGrid, look_at_camera


def make_intrinsics(f=60.0, w=64, h=48):
    return np.array([[f, 0.0, (w - 1) / 2], [0.0, f, (h - 1) / 2], [0.0, 0.0, 1.0]])


@pytest.fixture
def scene():
    return ScenePlaneGrid((0.0, 0.0), 0.25, (48, 56), 1.75)


@pytest.fixture
def cam_pair():
    K = make_intrinsics()
    cam0 = look_at_camera((0.0, -8.0, 5.0), (7.0, 6.0, 1.0), K, (64, 48), 0)
    cam1 = look_at_camera((12.0, -7.0, 6.0), (7.0, 6.0, 1.0), K, (64, 48), 1)
    return cam0, cam1


@pytest.fixture
def rectified_pair():
    """Identical fronto-parallel cameras displaced along x (horizontal stereo)."""
    K = make_intrinsics(f=50.0, w=40, h=30)
    R = np.array([[1.0, 0, 0], [0, 0, -1.0], [0, 1.0, 0]])   # looking along +y
    cam0 = CameraModel(K, R, -R @ np.array([0.0, -5.0, 1.0]), (40, 30), 0)
    cam1 = CameraModel(K, R, -R @ np.array([2.0, -5.0, 1.0]), (40, 30), 1)
    return cam0, cam1
