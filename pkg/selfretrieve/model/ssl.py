from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from scipy.special import logsumexp

from selfretrieve.exceptions import ConfigurationError, DatasetError, TrainingError
from selfretrieve.image.augment import AugmentConfig, augment
from selfretrieve.image.proposals import validate_regions
from selfretrieve.model.encoder import (
    EncoderConfig,
    EncoderParams,
    embed_regions_raw,
    image_to_array,
    normalize_rows,
)
from selfretrieve.model.optim import SGD
from selfretrieve.model.tensor import NORM_EPS, info_nce_loss, l2_normalize, no_grad, take_rows
from selfretrieve.util.parallel import prefetch

if TYPE_CHECKING:
    from collections.abc import Iterator, Mapping, Sequence

    from selfretrieve.image.image import Image
    from selfretrieve.image.proposals import Region
    from selfretrieve.model.tensor import Tensor

log = logging.getLogger(__name__)
log.setLevel(os.getenv("SELFRETRIEVE_LOG_SSL", "NOTSET"))

UNIT_TOLERANCE = 1e-3


@dataclass
class SslConfig:
    """Hyperparameters of momentum-contrast training on region views."""

    temperature: float = 0.2
    batch_size: int = 16
    queue_size: int = 256
    momentum: float = 0.999
    epochs: int = 50
    lr: float = 0.03
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    # Defaults to one pass over the regions per epoch
    steps_per_epoch: int | None = None
    include_positive: bool = True
    use_distractors: bool = False
    prefetch: int = 2
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive", "ssl.temperature")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be positive", "ssl.batch_size")
        if self.queue_size < self.batch_size:
            raise ConfigurationError("queue size must be at least the batch size", "ssl.queue_size")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)", "ssl.momentum")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative", "ssl.epochs")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigurationError("learning rate and weight decay must be non-negative", "ssl.lr")
        if not 0 <= self.sgd_momentum < 1:
            raise ConfigurationError("optimizer momentum must lie in [0, 1)", "ssl.sgd_momentum")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigurationError("steps per epoch must be positive", "ssl.steps_per_epoch")
        if self.prefetch < 1:
            raise ConfigurationError("prefetch depth must be positive", "ssl.prefetch")


class NegativeQueue:
    """Fixed capacity FIFO of unit key vectors used as contrastive negatives."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ValueError(f"Invalid queue geometry: capacity={capacity}, dim={dim}")
        self.capacity = capacity
        self.dim = dim
        self.buffer = np.zeros((capacity, dim), dtype=np.float32)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    @classmethod
    def random(cls, capacity: int, dim: int, rng: np.random.Generator) -> NegativeQueue:
        """A full queue of random unit vectors, so the loss is defined from the first step."""
        queue = cls(capacity, dim)
        vectors = rng.standard_normal((capacity, dim))
        queue.enqueue(vectors / np.linalg.norm(vectors, axis=1, keepdims=True))
        return queue

    def enqueue(self, keys: np.ndarray) -> None:
        keys = np.atleast_2d(keys)
        if keys.shape[1] != self.dim:
            raise ValueError(f"Keys have dimension {keys.shape[1]}, queue holds {self.dim}")
        if np.abs(np.linalg.norm(keys, axis=1) - 1).max(initial=0) > UNIT_TOLERANCE:
            raise ValueError("Queue keys must be unit vectors")

        for key in keys:
            self.buffer[self.cursor] = key
            self.cursor = (self.cursor + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def keys(self) -> np.ndarray:
        """Stored keys from oldest to newest."""
        if self.size < self.capacity:
            return self.buffer[: self.size].copy()
        return np.concatenate([self.buffer[self.cursor :], self.buffer[: self.cursor]])


def info_nce(
    query: np.ndarray,
    positive_key: np.ndarray,
    negatives: np.ndarray,
    temperature: float,
    include_positive: bool = True,
) -> float:
    """InfoNCE loss of a single query against its positive key and a set of negative keys.

    Args:
        query: Unit query vector.
        positive_key: Unit key of the other view of the same region.
        negatives: ``(K, dim)`` unit negative keys.
        temperature: Softmax temperature.
        include_positive: Whether the positive term is part of the denominator.

    Raises:
        ValueError: On a non-positive temperature or mismatching dimensions.
    """
    if temperature <= 0:
        raise ValueError(f"Temperature must be positive, got {temperature}")

    query = np.asarray(query, dtype=np.float64)
    positive_key = np.asarray(positive_key, dtype=np.float64)
    if query.ndim != 1 or positive_key.shape != query.shape:
        raise ValueError(f"Dimension mismatch between query {query.shape} and key {positive_key.shape}")

    negatives = np.asarray(negatives, dtype=np.float64)
    if negatives.size == 0:
        negatives = negatives.reshape(0, query.shape[0])
    if negatives.ndim != 2 or negatives.shape[1] != query.shape[0]:
        raise ValueError(f"Dimension mismatch between query {query.shape} and negatives {negatives.shape}")
    if not include_positive and not len(negatives):
        raise ValueError("At least one negative is required when the positive is excluded")

    positive = query @ positive_key / temperature
    negative = negatives @ query / temperature
    logits = np.append(negative, positive) if include_positive else negative
    return float(logsumexp(logits) - positive)


def momentum_update(key_params: EncoderParams, query_params: EncoderParams, momentum: float) -> None:
    """Move every key parameter towards its query counterpart: ``k = m * k + (1 - m) * q``, in place."""
    if set(key_params) != set(query_params):
        raise ValueError("Key and query encoders have different parameters")

    for name in key_params:
        key, query = key_params[name], query_params[name]
        if key.shape != query.shape:
            raise ValueError(f"Shape mismatch for {name}: {key.shape} != {query.shape}")
        key.data[...] = momentum * key.data + (1 - momentum) * query.data


@dataclass
class SslResult:
    params: EncoderParams
    history: list[float] = field(default_factory=list)
    skipped_steps: int = 0
    skipped_samples: int = 0


@dataclass
class _Batch:
    epoch: int
    step: int
    queries: np.ndarray
    keys: np.ndarray


def _batches(
    images: Mapping[str, Image],
    regions: Sequence[Region],
    cfg: SslConfig,
    augment_cfg: AugmentConfig,
    steps_per_epoch: int,
    rng: np.random.Generator,
    dtype: type,
) -> Iterator[_Batch]:
    for epoch in range(cfg.epochs):
        for step in range(steps_per_epoch):
            chosen = rng.choice(len(regions), size=cfg.batch_size, replace=False)
            queries, keys = [], []
            for index in chosen:
                region = regions[index]
                crop = region.crop(images[region.image_id])
                queries.append(image_to_array(augment(crop, augment_cfg, rng), dtype))
                keys.append(image_to_array(augment(crop, augment_cfg, rng), dtype))
            yield _Batch(epoch, epoch * steps_per_epoch + step, np.stack(queries), np.stack(keys))


def train_ssl(
    images: Mapping[str, Image],
    regions: Sequence[Region],
    cfg: SslConfig,
    augment_cfg: AugmentConfig | None = None,
    encoder_cfg: EncoderConfig | None = None,
    params: EncoderParams | None = None,
) -> SslResult:
    """Train the query encoder with InfoNCE against a momentum encoder and a queue of negatives.

    Every step samples a batch of regions, draws two augmented views of each, embeds the first view
    with the query encoder and the second with the momentum encoder, and updates only the query encoder
    by gradient descent. The momentum encoder then follows the query encoder and the new keys replace
    the oldest entries of the queue. Samples whose query or key embedding is zero are left out of their
    step, and a step without any usable sample is skipped.

    Args:
        images: Source images by id.
        regions: Training regions referencing ``images``.
        cfg: Training hyperparameters.
        augment_cfg: View augmentation; its output side is the encoder input side.
        encoder_cfg: Architecture used when no initial ``params`` are given.
        params: Initial parameters, modified in place.

    Raises:
        TrainingError: With fewer than two batches worth of regions, regions outside their image or when the
            loss becomes non-finite.
    """
    encoder_cfg = encoder_cfg or EncoderConfig()
    augment_cfg = augment_cfg or AugmentConfig(output_side=encoder_cfg.input_side)

    if len(regions) < 2 * cfg.batch_size:
        raise TrainingError(f"Need at least {2 * cfg.batch_size} regions for training, got {len(regions)}")
    missing = {region.image_id for region in regions} - set(images)
    if missing:
        raise TrainingError(f"Regions reference unknown images: {sorted(missing)[:5]}")
    try:
        validate_regions(regions, {image_id: (image.width, image.height) for image_id, image in images.items()})
    except DatasetError as e:
        raise TrainingError(str(e)) from e

    seed = cfg.seed if cfg.seed is not None else 0
    init_rng = np.random.default_rng([encoder_cfg.seed if encoder_cfg.seed is not None else seed, 0])
    sample_rng = np.random.default_rng([augment_cfg.seed if augment_cfg.seed is not None else seed, 1])

    if params is None:
        params = EncoderParams.initialize(encoder_cfg, init_rng)
    key_params = params.copy()
    queue = NegativeQueue.random(cfg.queue_size, params.projection_dim, init_rng)

    optimizer = SGD(
        params.named_parameters(("conv", "head")),
        lr=cfg.lr,
        momentum=cfg.sgd_momentum,
        weight_decay=cfg.weight_decay,
    )

    steps_per_epoch = cfg.steps_per_epoch or max(1, len(regions) // cfg.batch_size)
    dtype = params["head1.weight"].dtype
    batches = _batches(images, regions, cfg, augment_cfg, steps_per_epoch, sample_rng, dtype)

    result = SslResult(params)
    losses = []
    for batch in prefetch(batches, cfg.prefetch):
        with no_grad():
            keys = embed_regions_raw(key_params, batch.keys).data
        queries = embed_regions_raw(params, batch.queries)

        valid = np.flatnonzero(
            (np.linalg.norm(queries.data, axis=1) >= NORM_EPS) & (np.linalg.norm(keys, axis=1) >= NORM_EPS)
        )
        dropped = len(keys) - len(valid)
        if dropped:
            log.debug("Step %d: dropping %d samples with zero embeddings", batch.step, dropped)
            result.skipped_samples += dropped
        if not len(valid):
            log.warning("Skipping step %d: every sample has a zero embedding", batch.step)
            result.skipped_steps += 1
        else:
            if dropped:
                queries = take_rows(queries, valid)
                keys = keys[valid]
            queries = l2_normalize(queries)
            keys = normalize_rows(keys)
            losses.append(_step(optimizer, queries, keys, queue, cfg, batch.step))
            momentum_update(key_params, params, cfg.momentum)

        if (batch.step + 1) % steps_per_epoch == 0:
            mean_loss = float(np.mean(losses)) if losses else math.nan
            result.history.append(mean_loss)
            log.info("Epoch %d/%d: mean loss %.4f", batch.epoch + 1, cfg.epochs, mean_loss)
            losses = []

    return result


def _step(optimizer: SGD, queries: Tensor, keys: np.ndarray, queue: NegativeQueue, cfg: SslConfig, step: int) -> float:
    loss = info_nce_loss(queries, keys, queue.keys(), cfg.temperature, cfg.include_positive)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"Non-finite loss {value} at step {step}")

    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    queue.enqueue(keys)
    return value


def write_history(path: Path | str, history: Sequence[float]) -> None:
    """Write the per-epoch loss history as CSV with columns ``epoch,mean_loss``."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss"])
        writer.writerows((epoch, f"{loss:.8f}") for epoch, loss in enumerate(history, start=1))
