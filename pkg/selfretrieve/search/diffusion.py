from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lu_factor, lu_solve, solve
from scipy.sparse.linalg import splu, spsolve

from selfretrieve.exceptions import ConfigurationError, ConvergenceError

if TYPE_CHECKING:
    from collections.abc import Iterable, Iterator, Sequence

    from selfretrieve.model.checkpoint import EmbeddingTable

log = logging.getLogger(__name__)
log.setLevel(os.getenv("SELFRETRIEVE_LOG_DIFFUSION", "NOTSET"))

MODES = ("closed", "iterative")


@dataclass
class DiffusionConfig:
    knn: int = 10
    gamma: float = 3.0
    alpha: float = 0.99
    mode: str = "closed"
    tol: float = 1e-6
    max_iter: int = 1000
    # Largest graph solved with a dense factorization
    dense_limit: int = 2000

    def __post_init__(self) -> None:
        if self.knn < 1:
            raise ConfigurationError("knn must be positive", "diffusion.knn")
        if self.gamma <= 0:
            raise ConfigurationError("gamma must be positive", "diffusion.gamma")
        if not 0 <= self.alpha < 1:
            raise ConfigurationError("alpha must lie in [0, 1)", "diffusion.alpha")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}", "diffusion.mode")
        if self.tol <= 0 or self.max_iter < 1:
            raise ConfigurationError("tolerance and iteration limit must be positive", "diffusion.tol")


class AffinityGraph:
    """Symmetric non-negative kNN affinity matrix with its symmetric normalization.

    Args:
        ids: Node identifiers, in matrix order.
        weights: Sparse ``(n, n)`` affinity matrix ``W``.
    """

    def __init__(self, ids: Sequence[str], weights: sp.spmatrix):
        weights = sp.csr_matrix(weights, dtype=np.float64)
        n = len(ids)
        if weights.shape != (n, n):
            raise ValueError(f"Weight matrix of shape {weights.shape} does not match {n} ids")
        if weights.nnz and weights.data.min() < 0:
            raise ValueError("Affinities must be non-negative")
        if abs(weights - weights.T).max() > 0:
            raise ValueError("Affinity matrix must be symmetric")
        if weights.diagonal().any():
            raise ValueError("Affinity matrix must have a zero diagonal")

        weights.eliminate_zeros()
        self.ids = list(ids)
        self.weights = weights

        degree = np.asarray(weights.sum(axis=1)).ravel()
        self.isolated = degree == 0
        inv_sqrt = np.zeros(n)
        inv_sqrt[~self.isolated] = 1.0 / np.sqrt(degree[~self.isolated])
        scale = sp.diags(inv_sqrt)
        self.normalized = sp.csr_matrix(scale @ weights @ scale)

    def __len__(self) -> int:
        return len(self.ids)

    def edges(self) -> Iterator[tuple[int, int, float]]:
        """Upper triangular edges ``(i, j, w)`` with ``i < j``."""
        upper = sp.triu(self.weights, k=1).tocoo()
        order = np.lexsort((upper.col, upper.row))
        for k in order:
            yield int(upper.row[k]), int(upper.col[k]), float(upper.data[k])


def build_graph(table: EmbeddingTable, knn: int = 10, gamma: float = 3.0) -> AffinityGraph:
    """kNN graph over cosine similarities with weights ``max(cos, 0) ** gamma``, symmetrized by maximum.

    Neighbours with equal similarity are taken in table order.
    """
    n = len(table)
    if n < 2:
        raise ValueError(f"Need at least 2 embeddings for a graph, got {n}")
    if not 1 <= knn < n:
        raise ValueError(f"knn must lie in [1, {n - 1}], got {knn}")
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")

    vectors = table.vectors.astype(np.float64)
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    similarity = np.clip(vectors @ vectors.T, -1.0, 1.0)
    np.fill_diagonal(similarity, -np.inf)

    neighbours = np.argsort(-similarity, axis=1, kind="stable")[:, :knn]
    rows = np.repeat(np.arange(n), knn)
    cols = neighbours.ravel()
    values = np.maximum(similarity[rows, cols], 0.0) ** gamma

    directed = sp.csr_matrix((values, (rows, cols)), shape=(n, n))
    graph = AffinityGraph(table.ids, directed.maximum(directed.T))
    log.debug("Affinity graph: %d nodes, %d edges, %d isolated", n, graph.weights.nnz // 2, graph.isolated.sum())
    return graph


def _check_seed(graph: AffinityGraph, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] != len(graph):
        raise ValueError(f"Seed vector of length {y.shape[0]} does not match graph of {len(graph)} nodes")
    if (y < 0).any():
        raise ValueError("Seed vector must be non-negative")
    if not y.any(axis=0).all():
        raise ValueError("Seed vector must not be zero")
    return y


def diffuse(
    graph: AffinityGraph,
    y: np.ndarray,
    alpha: float = 0.99,
    mode: str = "closed",
    tol: float = 1e-6,
    max_iter: int = 1000,
    dense_limit: int = 2000,
) -> np.ndarray:
    """Diffuse a seed vector over the graph: ``f = (1 - alpha) (I - alpha S)^-1 y``.

    The closed mode solves the linear system, densely for graphs of at most ``dense_limit`` nodes. The
    iterative mode repeats ``f = alpha S f + (1 - alpha) y`` until the largest change drops below ``tol``.

    Raises:
        ConvergenceError: If the iterative mode does not converge within ``max_iter`` iterations.
    """
    if not 0 <= alpha < 1:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    if mode not in MODES:
        raise ValueError(f"Unknown diffusion mode: {mode}")

    y = _check_seed(graph, y)
    if alpha == 0:
        return y.copy()

    n = len(graph)
    if mode == "closed":
        if n <= dense_limit:
            system = np.eye(n) - alpha * graph.normalized.toarray()
            return (1 - alpha) * solve(system, y, assume_a="sym")
        system = sp.identity(n, format="csc") - alpha * graph.normalized.tocsc()
        return (1 - alpha) * spsolve(system, y)

    f = y.copy()
    residual = np.inf
    for _ in range(max_iter):
        updated = alpha * (graph.normalized @ f) + (1 - alpha) * y
        residual = float(np.abs(updated - f).max())
        f = updated
        if residual < tol:
            return f
    raise ConvergenceError(f"Diffusion did not converge in {max_iter} iterations", residual)


def diffuse_many(graph: AffinityGraph, seeds: np.ndarray, alpha: float = 0.99, dense_limit: int = 2000) -> np.ndarray:
    """Closed-form diffusion of the columns of ``seeds``, factorizing ``I - alpha S`` once."""
    if not 0 <= alpha < 1:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")

    seeds = _check_seed(graph, seeds)
    if alpha == 0:
        return seeds.copy()

    n = len(graph)
    if n <= dense_limit:
        factors = lu_factor(np.eye(n) - alpha * graph.normalized.toarray())
        return (1 - alpha) * lu_solve(factors, seeds)
    factors = splu(sp.identity(n, format="csc") - alpha * graph.normalized.tocsc())
    return (1 - alpha) * factors.solve(seeds)


@dataclass(frozen=True)
class RankedList:
    """``(id, score)`` pairs by descending score, ties broken by ascending id."""

    entries: tuple[tuple[str, float], ...]

    def __post_init__(self) -> None:
        ids = [image_id for image_id, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("Ranked list contains duplicate ids")
        scores = [score for _, score in self.entries]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("Ranked list scores must be non-increasing")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[str, float]]:
        return iter(self.entries)

    @property
    def ids(self) -> list[str]:
        return [image_id for image_id, _ in self.entries]

    @property
    def scores(self) -> list[float]:
        return [score for _, score in self.entries]

    def top(self, k: int) -> RankedList:
        return RankedList(self.entries[:k])

    @classmethod
    def from_scores(cls, ids: Sequence[str], scores: Iterable[float]) -> RankedList:
        pairs = sorted(zip(ids, (float(s) for s in scores)), key=lambda pair: (-pair[1], pair[0]))
        return cls(tuple(pairs))


def rank_from_scores(ids: Sequence[str], scores: np.ndarray, k: int, exclude: str | None = None) -> RankedList:
    """Top ``k`` ids by descending score, leaving out ``exclude``."""
    candidates = [(image_id, score) for image_id, score in zip(ids, np.asarray(scores)) if image_id != exclude]
    if not 1 <= k <= len(candidates):
        raise ValueError(f"k must lie in [1, {len(candidates)}], got {k}")
    return RankedList.from_scores(*zip(*candidates)).top(k)


def rank_euclidean(table: EmbeddingTable, anchor: str, k: int) -> RankedList:
    """Top ``k`` neighbours of ``anchor`` by ascending Euclidean distance, scored with the negated distance."""
    if anchor not in table:
        raise KeyError(f"Unknown id: {anchor}")

    vectors = table.vectors.astype(np.float64)
    distances = np.linalg.norm(vectors - vectors[table.index[anchor]], axis=1)
    return rank_from_scores(table.ids, -distances, k, exclude=anchor)


def write_edges(path: Path | str, graph: AffinityGraph) -> int:
    """Export the graph as JSONL edges ``{i, j, w}`` keyed by id."""
    count = 0
    with Path(path).open("w") as fh:
        for i, j, w in graph.edges():
            fh.write(json.dumps({"i": graph.ids[i], "j": graph.ids[j], "w": w}, sort_keys=True) + "\n")
            count += 1
    return count


def write_scores(path: Path | str, ids: Sequence[str], scores: dict[str, np.ndarray]) -> None:
    """Write diffusion score vectors as CSV, one row per seed id and one column per node."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["seed", *ids])
        for seed, vector in scores.items():
            writer.writerow([seed, *(f"{value:.10g}" for value in vector)])
