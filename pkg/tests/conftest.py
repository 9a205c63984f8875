"""Shared fixtures: a tiny stream and model sized for fast unit tests."""

import numpy as np
import pytest

from mulki.runner import HyperParams, ModelConfig
from mulki.taskgen import StreamConfig, generate_stream

TINY_MODEL = dict(d_tok=8, hidden=16, embed_dim=8)


def tiny_stream_config(**overrides):
    base = dict(
        n_tasks=2,
        classes_per_task=3,
        d_in=8,
        train_per_class=12,
        test_per_class=6,
        pretrain_per_class=4,
        seed=7,
    )
    base.update(overrides)
    return StreamConfig(**base)


def fast_hyper(**overrides):
    base = dict(
        iterations_per_task=6,
        pretrain_iterations=8,
        batch_size=8,
        we_interval=3,
    )
    base.update(overrides)
    return HyperParams(**base)


@pytest.fixture(scope="session")
def tiny_stream():
    return generate_stream(tiny_stream_config())


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
