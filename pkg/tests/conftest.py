"""Shared fixtures: tiny models, hand-built sequences and the --runslow switch."""

import os
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from classifier import Model, ModelConfig
from geodata import FrameMetadata, ImageChip, SceneSequence
from scene_synth import SynthConfig

settings.register_profile("quick", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.register_profile("thorough", max_examples=1000, deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "quick"))

REPO_ROOT = Path(__file__).resolve().parents[1]
SMOKE_CONFIG = REPO_ROOT / "configs" / "smoke.json"
T0 = datetime(2020, 1, 1, 10, 30, tzinfo=timezone.utc)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the benchmark-scale statistical checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: benchmark-scale check, deselected unless --runslow is given")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def frame_metadata(index: int = 0, **overrides) -> FrameMetadata:
    fields = dict(
        gsd_m_per_px=0.5,
        off_nadir_deg=10.0,
        cloud_cover_frac=0.0,
        sun_elevation_deg=70.0,
        timestamp=T0 + timedelta(days=30 * index),
        bbox=(0, 0, 8, 8),
    )
    fields.update(overrides)
    return FrameMetadata(**fields)


def build_sequence(pixels, label: int = 0, scene_id: str = "scene", per_frame=None, **meta) -> SceneSequence:
    """Sequence from a list of S x S x 3 arrays; ``per_frame`` holds metadata overrides per frame."""
    frames = []
    for i, px in enumerate(pixels):
        fields = dict(meta)
        if per_frame is not None:
            fields.update(per_frame[i])
        frames.append(ImageChip(np.asarray(px, dtype=np.float32), frame_metadata(i, **fields)))
    return SceneSequence(scene_id, label, tuple(frames))


def build_linear_model(size: int = 8, class_count: int = 2, scale: float = 0.05, seed: int = 0,
                       weights=None) -> Model:
    """Linear-softmax classifier over raw pixels (no conv blocks, no hidden layers)."""
    config = ModelConfig(input_size=size, class_count=class_count, conv_filters=(), dense_widths=(), seed=seed)
    if weights is None:
        rng = np.random.default_rng(seed)
        weights = rng.normal(0.0, scale, size=(size * size * 3, class_count))
    params = {
        "head.weights": np.asarray(weights, dtype=np.float32),
        "head.bias": np.zeros(class_count, dtype=np.float32),
    }
    return Model(config, params)


@pytest.fixture
def make_meta():
    return frame_metadata


@pytest.fixture
def make_sequence():
    return build_sequence


@pytest.fixture
def make_linear_model():
    return build_linear_model


@pytest.fixture
def tiny_config():
    return ModelConfig(input_size=8, class_count=3, conv_filters=(2,), dense_widths=(4,), seed=1)


@pytest.fixture
def tiny_synth():
    return SynthConfig(class_count=2, sequences_per_class=2, frames=8, chip_size=16, val_fraction=0.5, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def smoke_config_path():
    return SMOKE_CONFIG
