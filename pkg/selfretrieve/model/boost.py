from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from itertools import product
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from scipy.spatial.distance import cdist, pdist

from selfretrieve.exceptions import ConfigurationError, TrainingError
from selfretrieve.model.encoder import crow_descriptors
from selfretrieve.model.optim import SGD
from selfretrieve.model.tensor import Tensor, l2_normalize, linear, triplet_margin_loss
from selfretrieve.search.diffusion import (
    DiffusionConfig,
    build_graph,
    diffuse,
    diffuse_many,
    rank_euclidean,
    rank_from_scores,
)
from selfretrieve.util.parallel import parallel_map

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence

    from selfretrieve.image.image import Image
    from selfretrieve.model.checkpoint import EmbeddingTable
    from selfretrieve.model.encoder import EncoderParams
    from selfretrieve.search.diffusion import AffinityGraph

log = logging.getLogger(__name__)
log.setLevel(os.getenv("SELFRETRIEVE_LOG_BOOST", "NOTSET"))

# Lower bound of the automatic mean shift bandwidth
MIN_BANDWIDTH = 1e-6


@dataclass
class BoostConfig:
    """Self-boosting: pseudo-label mining and fine-tuning of the appended fully connected layer."""

    margin: float = 0.2
    k_min: int = 2
    # None selects min(50, n // 10)
    k_max: int | None = None
    bandwidth: float | str = "auto"
    mean_shift_iter: int = 300
    max_triplets_per_anchor: int = 50
    epochs: int = 20
    lr: float = 0.01
    batch_size: int = 32
    sgd_momentum: float = 0.9
    weight_decay: float = 0.0
    mine_distractors: bool = False
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ConfigurationError("margin must be positive", "boost.margin")
        if self.k_min < 2:
            raise ConfigurationError("k_min must be at least 2", "boost.k_min")
        if self.k_max is not None and self.k_max < self.k_min:
            raise ConfigurationError("k_max must not be below k_min", "boost.k_max")
        if self.bandwidth != "auto" and (isinstance(self.bandwidth, str) or self.bandwidth <= 0):
            raise ConfigurationError("bandwidth must be positive or 'auto'", "boost.bandwidth")
        if self.mean_shift_iter < 1:
            raise ConfigurationError("iteration limit must be positive", "boost.mean_shift_iter")
        if self.max_triplets_per_anchor < 1:
            raise ConfigurationError("triplet budget must be positive", "boost.max_triplets_per_anchor")
        if self.epochs < 0 or self.lr < 0 or self.batch_size < 1:
            raise ConfigurationError("invalid training schedule", "boost.epochs")

    def k_range(self, n: int) -> tuple[int, int]:
        """The ``[k_min, k_max]`` search range for a collection of ``n`` images."""
        k_max = self.k_max
        if k_max is None:
            k_max = min(n - 1, max(self.k_min, min(50, n // 10)))
        if k_max > n - 1 or self.k_min > k_max:
            raise ValueError(f"k range [{self.k_min}, {k_max}] exceeds the {n - 1} neighbours available")
        return self.k_min, k_max


@dataclass(frozen=True)
class PseudoLabelSet:
    anchor: str
    k: int
    positives: tuple[str, ...]
    negatives: tuple[str, ...]

    def __post_init__(self) -> None:
        if set(self.positives) & set(self.negatives):
            raise ValueError("Positive and negative pseudo-labels overlap")
        if self.anchor in self.positives or self.anchor in self.negatives:
            raise ValueError("Anchor cannot be its own pseudo-label")


@dataclass(frozen=True)
class Triplet:
    anchor: str
    positive: str
    negative: str

    def __post_init__(self) -> None:
        if len({self.anchor, self.positive, self.negative}) != 3:
            raise ValueError(f"Triplet ids must be distinct: {self}")


def resolve_bandwidth(vectors: np.ndarray, bandwidth: float | str) -> float:
    if bandwidth == "auto":
        return max(0.5 * float(np.median(pdist(vectors))), MIN_BANDWIDTH)
    if isinstance(bandwidth, str) or bandwidth <= 0:
        raise ValueError(f"Invalid bandwidth: {bandwidth}")
    return float(bandwidth)


def select_anchors(table: EmbeddingTable, bandwidth: float | str = "auto", max_iter: int = 300) -> list[str]:
    """Pick high density images as anchors by flat kernel mean shift.

    Every embedding is shifted to the mean of the embeddings within ``bandwidth`` until it stops
    moving. Modes closer than half the bandwidth are merged, keeping the mode with the largest support.
    The anchor of each mode is the embedding nearest to it.
    """
    if len(table) < 2:
        raise ValueError(f"Need at least 2 embeddings, got {len(table)}")

    data = table.vectors.astype(np.float64)
    radius = resolve_bandwidth(data, bandwidth)
    points = data.copy()

    for iteration in range(max_iter):
        inside = cdist(points, data) <= radius
        counts = inside.sum(axis=1, keepdims=True)
        shifted = np.where(counts > 0, (inside @ data) / np.maximum(counts, 1), points)
        moved = np.abs(shifted - points).max()
        points = shifted
        if moved == 0:
            break
    else:
        log.debug("Mean shift did not settle within %d iterations", iteration + 1)

    support = (cdist(points, data) <= radius).sum(axis=1)
    modes = []
    for index in sorted(range(len(points)), key=lambda i: (-support[i], i)):
        if all(np.linalg.norm(points[index] - mode) >= radius / 2 for mode in modes):
            modes.append(points[index])

    anchors = []
    for nearest in cdist(np.array(modes), data).argmin(axis=1):
        image_id = table.ids[nearest]
        if image_id not in anchors:
            anchors.append(image_id)

    log.info("Mean shift with bandwidth %.4g found %d anchors among %d images", radius, len(anchors), len(table))
    return anchors


def choose_k(diffusion_ranks: Sequence[str], euclidean_ranks: Sequence[str], k_min: int, k_max: int) -> int:
    """The ``k`` in ``[k_min, k_max]`` at which the two top-k lists are most dissimilar.

    Dissimilarity is ``1 - |R_k & R^e_k| / k``; ties resolve to the smallest ``k``.
    """
    if k_min < 1 or k_max < k_min:
        raise ValueError(f"Invalid k range [{k_min}, {k_max}]")
    if len(diffusion_ranks) < k_max or len(euclidean_ranks) < k_max:
        raise ValueError(f"Rankings must cover at least {k_max} ids")

    best_k, best = k_min, Fraction(-1)
    for k in range(k_min, k_max + 1):
        overlap = len(set(diffusion_ranks[:k]) & set(euclidean_ranks[:k]))
        dissimilarity = 1 - Fraction(overlap, k)
        if dissimilarity > best:
            best_k, best = k, dissimilarity
    return best_k


def pseudo_labels(anchor: str, diffusion_top: Sequence[str], euclidean_top: Sequence[str]) -> PseudoLabelSet:
    """Positives are diffusion neighbours missed by Euclidean search; negatives the reverse."""
    if len(diffusion_top) != len(euclidean_top):
        raise ValueError("Both rankings must have the same length")
    if anchor in diffusion_top or anchor in euclidean_top:
        raise ValueError(f"Anchor {anchor} must not appear in its own rankings")

    euclidean = set(euclidean_top)
    diffusion = set(diffusion_top)
    return PseudoLabelSet(
        anchor,
        len(diffusion_top),
        tuple(i for i in diffusion_top if i not in euclidean),
        tuple(i for i in euclidean_top if i not in diffusion),
    )


def triplet_loss(anchor: np.ndarray, positive: np.ndarray, negative: np.ndarray, margin: float) -> float:
    """``max(margin + |a - p|^2 - |a - n|^2, 0)``."""
    if margin <= 0:
        raise ValueError(f"Margin must be positive, got {margin}")
    anchor, positive, negative = (np.asarray(v, dtype=np.float64) for v in (anchor, positive, negative))
    if not anchor.shape == positive.shape == negative.shape:
        raise ValueError("Triplet vectors must have equal dimensions")
    return max(margin + float(((anchor - positive) ** 2).sum()) - float(((anchor - negative) ** 2).sum()), 0.0)


def assemble_triplets(
    labels: Iterable[PseudoLabelSet], max_per_anchor: int, rng: np.random.Generator
) -> list[Triplet]:
    """Pair every positive with every negative of each anchor, sampling down to ``max_per_anchor``."""
    triplets = []
    for label in labels:
        pairs = list(product(label.positives, label.negatives))
        if len(pairs) > max_per_anchor:
            keep = np.sort(rng.choice(len(pairs), size=max_per_anchor, replace=False))
            pairs = [pairs[i] for i in keep]
        triplets.extend(Triplet(label.anchor, positive, negative) for positive, negative in pairs)
    return triplets


@dataclass
class MiningResult:
    labels: list[PseudoLabelSet]
    scores: dict[str, np.ndarray] = field(default_factory=dict)


def mine_pseudo_labels(
    table: EmbeddingTable,
    anchors: Sequence[str],
    cfg: BoostConfig,
    diffusion_cfg: DiffusionConfig | None = None,
    graph: AffinityGraph | None = None,
) -> MiningResult:
    """Diffuse from every anchor and derive its pseudo-label set by comparing against Euclidean ranks."""
    diffusion_cfg = diffusion_cfg or DiffusionConfig()
    k_min, k_max = cfg.k_range(len(table))
    graph = graph or build_graph(table, min(diffusion_cfg.knn, len(table) - 1), diffusion_cfg.gamma)

    seeds = np.zeros((len(table), len(anchors)))
    for column, anchor in enumerate(anchors):
        seeds[table.index[anchor], column] = 1.0

    if diffusion_cfg.mode == "closed":
        scores = diffuse_many(graph, seeds, diffusion_cfg.alpha, diffusion_cfg.dense_limit).T
    else:
        scores = parallel_map(
            lambda column: diffuse(
                graph,
                column,
                diffusion_cfg.alpha,
                "iterative",
                diffusion_cfg.tol,
                diffusion_cfg.max_iter,
            ),
            list(seeds.T),
        )

    def label(item: tuple[str, np.ndarray]) -> PseudoLabelSet:
        anchor, score = item
        diffusion_ranks = rank_from_scores(table.ids, score, k_max, exclude=anchor).ids
        euclidean_ranks = rank_euclidean(table, anchor, k_max).ids
        k = choose_k(diffusion_ranks, euclidean_ranks, k_min, k_max)
        return pseudo_labels(anchor, diffusion_ranks[:k], euclidean_ranks[:k])

    labels = parallel_map(label, list(zip(anchors, scores)))
    for entry in labels:
        log.debug(
            "Anchor %s: k=%d, %d positives, %d negatives",
            entry.anchor,
            entry.k,
            len(entry.positives),
            len(entry.negatives),
        )
    return MiningResult(labels, dict(zip(anchors, scores)))


@dataclass
class BoostResult:
    params: EncoderParams
    history: list[float] = field(default_factory=list)


def fine_tune(
    params: EncoderParams,
    triplets: Sequence[Triplet],
    images: Mapping[str, Image],
    cfg: BoostConfig,
) -> BoostResult:
    """Train an identity-initialized fully connected layer on top of CroW pooling with the triplet loss.

    The convolution stack and the projection head are frozen; only ``boost.*`` is updated.

    Raises:
        TrainingError: If there are no triplets to train on.
    """
    if not triplets:
        raise TrainingError("No triplets were mined; widen the k range (boost.k_min, boost.k_max)")

    boosted = params.copy() if params.has_boost else params.with_boost_layer()

    ids = sorted({i for t in triplets for i in (t.anchor, t.positive, t.negative)})
    pooled = dict(zip(ids, crow_descriptors(boosted, [images[i] for i in ids])))

    usable = [t for t in triplets if all(np.any(pooled[i]) for i in (t.anchor, t.positive, t.negative))]
    if len(usable) < len(triplets):
        log.warning("Dropping %d triplets with degenerate pooled features", len(triplets) - len(usable))
    if not usable:
        raise TrainingError("All triplets reference images with degenerate pooled features")

    weight, bias = boosted["boost.weight"], boosted["boost.bias"]
    optimizer = SGD(boosted.named_parameters(("boost.",)), cfg.lr, cfg.sgd_momentum, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed if cfg.seed is not None else 0, 2])

    def embed(names: list[str]) -> Tensor:
        return l2_normalize(linear(Tensor(np.stack([pooled[i] for i in names])), weight, bias))

    result = BoostResult(boosted)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(usable))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [usable[i] for i in order[start : start + cfg.batch_size]]
            loss = triplet_margin_loss(
                embed([t.anchor for t in batch]),
                embed([t.positive for t in batch]),
                embed([t.negative for t in batch]),
                cfg.margin,
            )
            if not math.isfinite(loss.item()):
                raise TrainingError(f"Non-finite triplet loss in epoch {epoch + 1}")

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())

        result.history.append(float(np.mean(losses)))
        log.info("Boost epoch %d/%d: mean triplet loss %.4f", epoch + 1, cfg.epochs, result.history[-1])

    return result


def write_pseudo_labels(path: Path | str, labels: Iterable[PseudoLabelSet]) -> None:
    with Path(path).open("w") as fh:
        for label in labels:
            record = {
                "anchor": label.anchor,
                "k": label.k,
                "positives": list(label.positives),
                "negatives": list(label.negatives),
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_pseudo_labels(path: Path | str) -> list[PseudoLabelSet]:
    labels = []
    with Path(path).open() as fh:
        for line in fh:
            if line.strip():
                record = json.loads(line)
                positives, negatives = tuple(record["positives"]), tuple(record["negatives"])
                labels.append(PseudoLabelSet(record["anchor"], record["k"], positives, negatives))
    return labels


def write_triplets(path: Path | str, triplets: Iterable[Triplet]) -> None:
    with Path(path).open("w") as fh:
        fh.writelines(json.dumps(asdict(t), sort_keys=True) + "\n" for t in triplets)


def read_triplets(path: Path | str) -> list[Triplet]:
    with Path(path).open() as fh:
        return [Triplet(**json.loads(line)) for line in fh if line.strip()]
