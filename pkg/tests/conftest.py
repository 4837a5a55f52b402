"""Shared scene fixtures.

Rendering and visibility are the slow parts, so the stock scenes are built
once per session and treated as read-only by every test (fields get copied
before mutation).
"""

import numpy as np
import pytest

import depi


@pytest.fixture(scope="session")
def scene2():
    return depi.default_scene(2)


@pytest.fixture(scope="session")
def rig2(scene2):
    views, obs = depi.observations_from_scene(scene2)
    return views, obs


@pytest.fixture(scope="session")
def views2(rig2):
    return rig2[0]


@pytest.fixture(scope="session")
def obs2(rig2):
    return rig2[1]


@pytest.fixture(scope="session")
def gt2(views2):
    return [v.field for v in views2]


@pytest.fixture(scope="session")
def scene_small():
    """Cheap 32x32 stereo scene for optimizer and CLI smoke tests."""
    return depi.default_scene(2, resolution=(32, 32))


@pytest.fixture(scope="session")
def rig_small(scene_small):
    return depi.observations_from_scene(scene_small)


@pytest.fixture(scope="session")
def two_part_scene():
    """Two disjoint cylinder patches, to exercise part-aware code paths."""
    from depi.scene import Pose, SurfacePatch, SyntheticScene, TextureConfig, camera_ring

    left = SurfacePatch(kind="cylinder", radius=0.18, height=0.9,
                        extent_deg=300.0, pose=Pose(t=(-0.35, 0.0, 0.0)))
    right = SurfacePatch(kind="cylinder", radius=0.18, height=0.9,
                         extent_deg=300.0, pose=Pose(t=(0.35, 0.0, 0.0)))
    return SyntheticScene(
        patches=[left, right],
        cameras=camera_ring(2, distance=1.8),
        resolution=(64, 64),
        texture=TextureConfig(seed=11),
    )
