"""Shared fixtures: small deterministic scenes, camera rigs and one
session-scoped trained stream reused by the streaming and acceptance tests."""

import numpy as np
import pytest

from splatstream import grouping, rasterizer, scene_gen, train
from splatstream.camera import look_at
from splatstream.model import GaussianFrame, param_dim
from splatstream.scene_gen import SceneSpec


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def cam32():
    return look_at((0.0, 0.0, -2.5), (0.0, 0.0, 0.0), focal=40.0, resolution=(32, 32))


@pytest.fixture
def two_cams():
    return [
        look_at((0.0, 0.0, -2.5), (0.0, 0.0, 0.0), focal=40.0, resolution=(32, 32)),
        look_at((2.5, 0.3, 0.0), (0.0, 0.0, 0.0), focal=40.0, resolution=(32, 32)),
    ]


def random_frame(rng, n, sh_degree=0, spread=0.4):
    """A renderable random frame: blobs near the origin with sane scales."""
    width = param_dim(sh_degree)
    params = np.zeros((n, width))
    params[:, 0:3] = rng.uniform(-spread, spread, (n, 3))
    params[:, 3:7] = rng.normal(size=(n, 4))
    params[:, 3:7] /= np.linalg.norm(params[:, 3:7], axis=1, keepdims=True)
    params[:, 7:10] = np.log(rng.uniform(0.05, 0.2, (n, 3)))
    params[:, 10] = rng.uniform(0.5, 3.0, n)
    params[:, 11:14] = rng.normal(0, 1.0, (n, 3))
    if sh_degree >= 1:
        params[:, 14:] = rng.normal(0, 0.1, (n, width - 14))
    return GaussianFrame(params=params, frame_index=0, group_key=0)


@pytest.fixture
def frame_factory():
    return random_frame


def small_scene_spec(num_frames=4, appearance_frames=(), seed=0):
    return SceneSpec(
        num_blobs=4,
        num_frames=num_frames,
        mover_fraction=0.25,
        motion_amplitude=0.08,
        appearance_frames=appearance_frames,
        seed=seed,
    )


def targets_for(frames, cams):
    return [
        train.GroundTruth(images=tuple(rasterizer.render(f, cam).pixels for cam in cams))
        for f in frames
    ]


@pytest.fixture(scope="session")
def trained_setup():
    """One small trained stream shared across tests (training is the slow
    part; every consumer treats the result as read-only)."""
    spec = small_scene_spec(num_frames=4)
    frames = scene_gen.gen_scene(spec)
    cams = scene_gen.default_rig(count=3, resolution=(48, 48))
    targets = targets_for(frames, cams)
    weights = train.LossWeights()
    first_cfg = train.TrainConfig(iterations=200, step_size=0.3, densify_interval=50)
    cfg = train.TrainConfig(iterations=40, step_size=0.05)
    stream = grouping.build_groups(
        targets, cams, weights, cfg, first_cfg, spec.bounds, init_count=24, tau_db=28.0
    )
    return {"spec": spec, "frames": frames, "cams": cams, "targets": targets,
            "stream": stream}
