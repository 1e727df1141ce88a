"""Shared fixtures.

The expensive end-to-end state (synthetic dataset, two trained flows,
privacy parameters) is built once per session and reused by the acceptance
tests and a few integration tests.  Wall-clock timings are recorded because
some acceptance criteria bound runtime.
"""

import os
import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from flowldp.flow import build_model, encode_dataset, save_model
from flowldp.mechanism import make_privacy_params, pixel_sensitivity
from flowldp.synth import generate_dataset, load_pixel_images, load_unit_images
from flowldp.training import TrainConfig, train

DESK_SHAPE = (16, 16, 1)
DESK_COUNTS = (600, 1000, 400)
DESK_TRAIN = dict(
    minibatch=16, epochs=30, samples_per_epoch=2000, learning_rate=1e-3, warmup_epochs=5
)


@dataclass
class Workspace:
    root: str
    manifests: dict
    m0: object
    m1: object
    m0_path: str
    m1_path: str
    params: object
    pixel_sens: np.ndarray
    train_result_m0: object
    train_result_m1: object
    train_seconds: float
    test_images: np.ndarray
    test_labels: list
    test_ids: list
    normal_pixels: np.ndarray
    mixture_pixels: np.ndarray
    timings: dict = field(default_factory=dict)


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_run")
    data_dir = os.path.join(root, "data")
    manifests = generate_dataset(data_dir, seed=1, shape=DESK_SHAPE[:2], counts=DESK_COUNTS)
    normal_pixels, _, _ = load_pixel_images(manifests["train_normal"])
    mixture_pixels, _, _ = load_pixel_images(manifests["train_mixture"])
    test_images, test_labels, test_ids = load_unit_images(manifests["test_unknown"])

    t0 = time.time()
    m0 = build_model(DESK_SHAPE, levels=2, depth=4, arch="glow", hidden=32, seed=10,
                     trained_on="train_normal")
    r0 = train(m0, normal_pixels, TrainConfig(seed=100, split_tag="train_normal", **DESK_TRAIN))
    t_m0 = time.time() - t0
    m1 = build_model(DESK_SHAPE, levels=2, depth=4, arch="glow", hidden=32, seed=11,
                     trained_on="train_mixture")
    r1 = train(m1, mixture_pixels, TrainConfig(seed=101, split_tag="train_mixture", **DESK_TRAIN))
    train_seconds = time.time() - t0

    m0_path = os.path.join(root, "m0.ckpt")
    m1_path = os.path.join(root, "m1.ckpt")
    save_model(m0, m0_path)
    save_model(m1, m1_path)

    mixture_images, _, _ = load_unit_images(manifests["train_mixture"])
    latents = encode_dataset(m1, mixture_images)
    params = make_privacy_params(latents, alpha=0.4, epsilon=np.inf)
    normal_images, _, _ = load_unit_images(manifests["train_normal"])
    sens = pixel_sensitivity(normal_images)

    return Workspace(
        root=str(root),
        manifests=manifests,
        m0=m0,
        m1=m1,
        m0_path=m0_path,
        m1_path=m1_path,
        params=params,
        pixel_sens=sens,
        train_result_m0=r0,
        train_result_m1=r1,
        train_seconds=train_seconds,
        test_images=test_images,
        test_labels=test_labels,
        test_ids=test_ids,
        normal_pixels=normal_pixels,
        mixture_pixels=mixture_pixels,
        timings={"train_m0": t_m0, "train_both": train_seconds},
    )


@pytest.fixture()
def tiny_model():
    """D = 4 model (2x2x1) with nontrivial parameters; exercises every layer."""
    from flowldp.flow import randomize_parameters

    model = build_model((2, 2, 1), levels=1, depth=3, arch="glow", hidden=6, seed=3)
    randomize_parameters(model, np.random.default_rng(17), scale=0.2)
    return model


@pytest.fixture()
def small_model():
    """D = 16 model (4x4x1, two levels) with nontrivial parameters."""
    from flowldp.flow import randomize_parameters

    model = build_model((4, 4, 1), levels=2, depth=2, arch="glow", hidden=4, seed=11)
    randomize_parameters(model, np.random.default_rng(5), scale=0.15)
    return model
