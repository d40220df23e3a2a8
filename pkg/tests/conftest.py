import numpy as np
import pytest

from patchassoc.rangeio import CameraIntrinsics
from patchassoc.synth import Plane, SceneSpec
from patchassoc.transform import RigidTransform, axis_angle


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_K():
    return CameraIntrinsics().scaled(0.5)


@pytest.fixture
def tiny_K():
    return CameraIntrinsics().scaled(0.25)


def plane_facing_camera(z=2.0, size=(20.0, 20.0), sid=0):
    """Plane at depth ``z`` whose normal faces a camera at the world origin."""
    return Plane(RigidTransform(axis_angle([1, 0, 0], np.pi), [0, 0, z]), size, sid)


def crease_scene():
    """Two perpendicular planes forming a ridge along x=0, z=2 that points at
    a camera in the origin.  Sensor-facing normals: left (-1,0,-1)/sqrt2,
    right (1,0,-1)/sqrt2.
    """
    left = Plane(RigidTransform(axis_angle([0, 1, 0], np.pi / 4 + np.pi), [-1.0, 0, 3.0]), (2 * np.sqrt(2), 6.0), 0)
    right = Plane(RigidTransform(axis_angle([0, 1, 0], -np.pi / 4 + np.pi), [1.0, 0, 3.0]), (2 * np.sqrt(2), 6.0), 1)
    return SceneSpec((left, right))


@pytest.fixture
def identity_pose():
    return RigidTransform.identity()
