from __future__ import annotations

import math
from typing import TYPE_CHECKING, Callable

import numpy as np
import pytest

from selfretrieve.exceptions import ConfigurationError, TrainingError
from selfretrieve.image.augment import AugmentConfig
from selfretrieve.image.proposals import Region, grid_partition
from selfretrieve.model import ssl
from selfretrieve.model.encoder import EncoderConfig, EncoderParams, embed_regions_raw
from selfretrieve.model.ssl import NegativeQueue, SslConfig, info_nce, momentum_update, train_ssl, write_history
from selfretrieve.model.tensor import Tensor
from tests.conftest import random_image

if TYPE_CHECKING:
    from pathlib import Path

    from selfretrieve.image.image import Image
    from selfretrieve.search.manifest import DatasetManifest

E = np.eye(5)


def training_set(count: int = 4, side: int = 48) -> tuple[dict[str, Image], list[Region]]:
    rng = np.random.default_rng(11)
    images = {f"img{i}": random_image(rng, side, side) for i in range(count)}
    regions = [region for image_id, image in images.items() for region in grid_partition(image, 6, image_id)]
    return images, regions


def test_info_nce_uniform() -> None:
    assert info_nce(E[0], E[1], E[2:5], 1.0) == pytest.approx(math.log(4), abs=1e-6)
    assert info_nce(E[0], E[1], E[2:5], 0.1) == pytest.approx(math.log(4), abs=1e-6)


def test_info_nce_values() -> None:
    assert info_nce(E[0], E[0], E[1:4], 1.0) == pytest.approx(0.7437, abs=1e-4)
    assert info_nce(E[0], E[0], E[1:4], 0.5) == pytest.approx(0.3408, abs=1e-4)
    assert info_nce(E[0], E[0], E[1:4], 1.0) == pytest.approx(-math.log(math.e / (math.e + 3)))


def test_info_nce_negative_order_invariant(rng: np.random.Generator) -> None:
    vectors = rng.standard_normal((10, 6))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    query, key, negatives = vectors[0], vectors[1], vectors[2:]

    assert info_nce(query, key, negatives, 0.2) == pytest.approx(info_nce(query, key, negatives[::-1], 0.2))
    assert info_nce(query, key, negatives, 0.2) == pytest.approx(info_nce(query, key, rng.permutation(negatives), 0.2))


def test_info_nce_stable_at_low_temperature(rng: np.random.Generator) -> None:
    vectors = rng.standard_normal((6, 4))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    query, key, negatives = vectors[0], vectors[1], vectors[2:]

    naive = -math.log(
        math.exp(query @ key / 0.5) / (math.exp(query @ key / 0.5) + sum(math.exp(query @ n / 0.5) for n in negatives))
    )
    assert info_nce(query, key, negatives, 0.5) == pytest.approx(naive)
    assert math.isfinite(info_nce(query, key, negatives, 1e-4))


def test_info_nce_excluding_positive() -> None:
    assert info_nce(E[0], E[0], E[1:4], 1.0, include_positive=False) == pytest.approx(math.log(3) - 1)

    with pytest.raises(ValueError):
        info_nce(E[0], E[0], np.zeros((0, 5)), 1.0, include_positive=False)


def test_info_nce_invalid() -> None:
    with pytest.raises(ValueError):
        info_nce(E[0], E[1], E[2:5], 0.0)
    with pytest.raises(ValueError):
        info_nce(E[0], E[1, :3], E[2:5], 1.0)


def test_negative_queue_fifo() -> None:
    queue = NegativeQueue(3, 5)
    assert len(queue) == 0

    queue.enqueue(E[:2])
    assert np.array_equal(queue.keys(), E[:2])

    queue.enqueue(E[2:5])
    assert len(queue) == 3
    assert np.array_equal(queue.keys(), E[2:5])

    queue.enqueue(E[0])
    assert np.array_equal(queue.keys(), E[[3, 4, 0]])


def test_negative_queue_rejects_invalid_keys() -> None:
    queue = NegativeQueue(4, 5)

    with pytest.raises(ValueError):
        queue.enqueue(E[:2] * 2)
    with pytest.raises(ValueError):
        queue.enqueue(np.ones((1, 3)) / np.sqrt(3))
    assert len(queue) == 0


def test_negative_queue_random() -> None:
    queue = NegativeQueue.random(16, 8, np.random.default_rng(0))

    assert len(queue) == 16
    assert np.allclose(np.linalg.norm(queue.keys(), axis=1), 1.0, atol=1e-5)


@pytest.mark.parametrize(("m", "expected"), [(0.0, 2.0), (1.0, 0.0), (0.5, 1.0)])
def test_momentum_update(m: float, expected: float) -> None:
    cfg = EncoderConfig(channels=(2,), projection_dim=2, input_side=4)
    key = EncoderParams.initialize(cfg, np.random.default_rng(0))
    query = key.copy()
    for name in key:
        key[name].data[...] = 0.0
        query[name].data[...] = 2.0

    momentum_update(key, query, m)

    assert all(np.allclose(key[name].data, expected) for name in key)
    assert all(np.allclose(query[name].data, 2.0) for name in query)


def test_momentum_update_mismatch(params: EncoderParams) -> None:
    with pytest.raises(ValueError):
        momentum_update(params, params.with_boost_layer(), 0.5)


def test_train_ssl_initial_loss() -> None:
    images, regions = training_set(count=4)
    regions = regions[:160]
    cfg = SslConfig(temperature=1.0, batch_size=8, queue_size=32, epochs=2, lr=0.0, seed=3)
    encoder_cfg = EncoderConfig(channels=(8, 16), projection_dim=16, input_side=16)

    result = train_ssl(images, regions, cfg, encoder_cfg=encoder_cfg)

    assert len(result.history) == 2
    assert result.skipped_steps == 0
    assert result.history[1] == pytest.approx(math.log(33), rel=0.2)


def test_train_ssl_deterministic() -> None:
    images, regions = training_set(count=3)
    cfg = SslConfig(batch_size=4, queue_size=8, epochs=1, steps_per_epoch=3, lr=0.05, seed=9)
    encoder_cfg = EncoderConfig(channels=(4, 8), projection_dim=8, input_side=16)
    augment_cfg = AugmentConfig(output_side=16)

    first = train_ssl(images, regions, cfg, augment_cfg, encoder_cfg)
    second = train_ssl(images, regions, cfg, augment_cfg, encoder_cfg)

    assert first.params.equals(second.params)
    assert first.history == second.history
    assert not first.params.equals(EncoderParams.initialize(encoder_cfg, np.random.default_rng([9, 0])))


def test_train_ssl_leaves_frozen_layers_alone() -> None:
    images, regions = training_set(count=2)
    cfg = SslConfig(batch_size=4, queue_size=8, epochs=1, steps_per_epoch=2, lr=0.05, seed=1)
    encoder_cfg = EncoderConfig(channels=(4, 8), projection_dim=8, input_side=16)
    params = EncoderParams.initialize(encoder_cfg, np.random.default_rng(0)).with_boost_layer()
    boost = params["boost.weight"].data.copy()

    train_ssl(images, regions, cfg, AugmentConfig(output_side=16), encoder_cfg, params)

    assert np.array_equal(params["boost.weight"].data, boost)


def test_train_ssl_too_few_regions() -> None:
    images, regions = training_set(count=1)
    cfg = SslConfig(batch_size=16, queue_size=16)

    with pytest.raises(TrainingError):
        train_ssl(images, regions[:31], cfg)


def test_train_ssl_unknown_image() -> None:
    images, regions = training_set(count=1)
    regions = [*regions, Region("missing", 0, 0, 8, 8)]

    with pytest.raises(TrainingError, match="unknown images"):
        train_ssl(images, regions, SslConfig(batch_size=2, queue_size=2))


def test_write_history(tmp_path: Path) -> None:
    write_history(tmp_path / "history.csv", [1.5, 0.25])

    assert (tmp_path / "history.csv").read_text() == "epoch,mean_loss\n1,1.50000000\n2,0.25000000\n"


@pytest.mark.parametrize(
    ("kwargs", "key"),
    [
        ({"temperature": 0.0}, "ssl.temperature"),
        ({"batch_size": 32, "queue_size": 16}, "ssl.queue_size"),
        ({"momentum": 1.0}, "ssl.momentum"),
    ],
)
def test_ssl_config_invalid(kwargs: dict, key: str) -> None:
    with pytest.raises(ConfigurationError) as e:
        SslConfig(**kwargs)

    assert e.value.key == key


def zero_rows(rows: slice) -> Callable[[EncoderParams, np.ndarray], Tensor]:
    def embed(params: EncoderParams, views: np.ndarray) -> Tensor:
        out = embed_regions_raw(params, views)
        mask = np.ones((out.shape[0], 1), dtype=out.dtype)
        mask[rows] = 0.0
        return out * Tensor(mask)

    return embed


def test_train_ssl_drops_zero_samples(monkeypatch: pytest.MonkeyPatch) -> None:
    images, regions = training_set(count=2)
    cfg = SslConfig(batch_size=4, queue_size=8, epochs=1, steps_per_epoch=3, lr=0.05, seed=2)
    encoder_cfg = EncoderConfig(channels=(4, 8), projection_dim=8, input_side=16)
    initial = EncoderParams.initialize(encoder_cfg, np.random.default_rng(0))
    monkeypatch.setattr(ssl, "embed_regions_raw", zero_rows(slice(0, 1)))

    result = train_ssl(images, regions, cfg, AugmentConfig(output_side=16), encoder_cfg, initial.copy())

    assert result.skipped_steps == 0
    assert result.skipped_samples == 3
    assert math.isfinite(result.history[0])
    assert not result.params.equals(initial)


def test_train_ssl_skips_all_zero_step(monkeypatch: pytest.MonkeyPatch) -> None:
    images, regions = training_set(count=2)
    cfg = SslConfig(batch_size=4, queue_size=8, epochs=1, steps_per_epoch=2, lr=0.05, seed=2)
    encoder_cfg = EncoderConfig(channels=(4, 8), projection_dim=8, input_side=16)
    initial = EncoderParams.initialize(encoder_cfg, np.random.default_rng(0))
    monkeypatch.setattr(ssl, "embed_regions_raw", zero_rows(slice(None)))

    result = train_ssl(images, regions, cfg, AugmentConfig(output_side=16), encoder_cfg, initial.copy())

    assert result.skipped_steps == 2
    assert result.skipped_samples == 8
    assert math.isnan(result.history[0])
    assert result.params.equals(initial)


def test_train_ssl_region_outside_image() -> None:
    images, regions = training_set(count=1, side=48)
    regions = [*regions, Region("img0", 40, 40, 16, 16)]

    with pytest.raises(TrainingError, match="outside image img0"):
        train_ssl(images, regions, SslConfig(batch_size=2, queue_size=2))


def test_train_ssl_loss_decreases(synth_dataset: DatasetManifest) -> None:
    entries = synth_dataset.database
    images = {entry.id: synth_dataset.load_image(entry) for entry in entries}
    regions = [Region(entry.id, *entry.box) for entry in entries]
    cfg = SslConfig(
        temperature=0.5, batch_size=8, queue_size=8, momentum=0.9, epochs=6, steps_per_epoch=15, lr=0.1, seed=4
    )
    encoder_cfg = EncoderConfig(channels=(8, 16), projection_dim=16, input_side=16)
    augment_cfg = AugmentConfig(
        crop_scale=(0.6, 1.0), jitter_prob=0.0, grayscale_prob=0.0, blur_prob=0.0, output_side=16
    )

    result = train_ssl(images, regions, cfg, augment_cfg, encoder_cfg)

    assert len(result.history) == 6
    assert all(math.isfinite(loss) for loss in result.history)
    assert result.history[-1] < result.history[0]
