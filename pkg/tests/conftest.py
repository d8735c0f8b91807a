from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np
import pytest

from selfretrieve.image.image import Image
from selfretrieve.model.encoder import EncoderConfig, EncoderParams
from selfretrieve.util.synthgen import SynthConfig, generate

if TYPE_CHECKING:
    from pathlib import Path

    from selfretrieve.search.manifest import DatasetManifest


def random_image(rng: np.random.Generator, width: int, height: int, channels: int = 3) -> Image:
    return Image(rng.integers(0, 256, (height, width, channels), dtype=np.uint8))


def square_image(side: int = 64, start: int = 15, stop: int = 43) -> Image:
    pixels = np.zeros((side, side, 3), dtype=np.uint8)
    pixels[start:stop, start:stop] = 255
    return Image(pixels)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def encoder_cfg() -> EncoderConfig:
    return EncoderConfig(channels=(8, 16), projection_dim=8, input_side=16)


@pytest.fixture
def params(encoder_cfg: EncoderConfig) -> EncoderParams:
    return EncoderParams.initialize(encoder_cfg, np.random.default_rng(7))


@pytest.fixture
def params64(encoder_cfg: EncoderConfig) -> EncoderParams:
    return EncoderParams.initialize(encoder_cfg, np.random.default_rng(7), np.float64)


@pytest.fixture(scope="session")
def synth_cfg() -> SynthConfig:
    return SynthConfig(classes=3, instances=6, side=64, distractors=4, seed=7)


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory: pytest.TempPathFactory, synth_cfg: SynthConfig) -> DatasetManifest:
    return generate(synth_cfg, tmp_path_factory.mktemp("synth"))


@pytest.fixture
def synth_root(synth_dataset: DatasetManifest) -> Path:
    return synth_dataset.root
