"""Shared fixtures: the trained toy model used by end-to-end checks."""

import time

import pytest

import sweepstereo as ss
from sweepstereo.inference import TrainConfig, train

# End-to-end toy protocol: 5 views at 64x64, 32 planes in blocks of 8,
# 200 training steps (50 epochs x 4 reference views, center view held out).
E2E_SPEC = dict(kind="plane-sphere", n_views=5, height=64, width=64,
                baseline=40.0, texture_scale=40.0, texture_octaves=3,
                sphere_radius=80.0)
E2E_SEED = 7
E2E_DEPTH_PLANES = 32
E2E_HOLDOUT = 2


@pytest.fixture(scope="session")
def toy_trained():
    """Train the toy model once per session; several suites reuse it.

    Returns (scene, network, train_seconds, loss_history).
    """
    scene = ss.generate_scene(ss.SceneSpec(**E2E_SPEC), seed=E2E_SEED)
    net = ss.DepthNetwork(ss.NetworkConfig(dtype="float32", block_size=8, seed=0))
    cfg = TrainConfig(epochs=50, depth_planes=E2E_DEPTH_PLANES, crop=32, seed=0,
                      holdout_refs=(E2E_HOLDOUT,))
    t0 = time.time()
    history = train(net, [scene], cfg)
    return scene, net, time.time() - t0, history
