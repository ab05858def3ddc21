import os

os.environ.setdefault("EPSR_LOG_TO_FILE", "0")
os.environ.setdefault("EPSR_PROGRESS", "0")
os.environ.setdefault("EPSR_DESK_SCALE", "0")

import numpy as np
import pytest

from epsr.image import Image, save_png
from epsr.models import (
    DiscriminatorConfig, FeatureExtractorConfig, GeneratorConfig, LossWeights, TrainConfig,
)


def pytest_collection_modifyitems(config, items):
    if os.getenv("EPSR_RUN_SLOW", "0") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set EPSR_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def textured(rng: np.random.Generator, height: int, width: int, channels: int = 3) -> np.ndarray:
    """Smooth shading plus a few hard-edged blocks and mild noise, values in [0, 1]."""
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    base = 0.5 + 0.2 * np.sin(2 * np.pi * (rng.uniform(1, 3) * xx + rng.uniform(0, 1)))
    base = base + 0.15 * np.cos(2 * np.pi * rng.uniform(1, 3) * yy)
    for _ in range(4):
        top, left = rng.integers(0, height - 2), rng.integers(0, width - 2)
        h, w = rng.integers(2, max(3, height // 2)), rng.integers(2, max(3, width // 2))
        base[top:top + h, left:left + w] += rng.uniform(-0.3, 0.3)
    planes = [base + rng.normal(0.0, 0.03, size=base.shape) + 0.05 * c for c in range(channels)]
    return np.clip(np.stack(planes, axis=-1), 0.0, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_image(rng):
    def _make(height: int = 32, width: int = 32, channels: int = 3, source=None) -> Image:
        return Image(pixels=textured(rng, height, width, channels), source=source)
    return _make


@pytest.fixture
def write_pngs(make_image):
    """Write ``count`` textured PNGs named img0.png.. into ``directory``."""
    def _write(directory, count: int = 3, height: int = 32, width: int = 32, channels: int = 3):
        paths = []
        for i in range(count):
            paths.append(save_png(make_image(height, width, channels), directory / f"img{i}.png"))
        return paths
    return _write


@pytest.fixture
def train_images(make_image):
    return [make_image(24, 24, source=f"train{i}.png") for i in range(4)]


@pytest.fixture
def tiny_config():
    """Smallest geometry the full pipeline accepts: 16x16 HR patches, 4x4 LR."""
    return TrainConfig(
        weights=LossWeights.of(1.0, 0.05, 0.4),
        epochs=5,
        batch=2,
        lr=1e-3,
        lr_halve_epoch=1,
        d_steps_per_g=2,
        patch=16,
        seed=7,
        checkpoint_every=2,
        log_every=1,
        max_iterations=3,
        generator=GeneratorConfig(num_blocks=1, num_features=4),
        discriminator=DiscriminatorConfig(channels=[4] * 8, input_size=16, fc_width=8),
        extractor=FeatureExtractorConfig(stage_channels=[4, 4, 4, 4, 4]),
    )
