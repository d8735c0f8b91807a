from __future__ import annotations

import csv
import json
import logging
import os
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from selfretrieve.exceptions import ConfigurationError, DatasetError
from selfretrieve.image.image import resize_longer_side
from selfretrieve.model.checkpoint import EmbeddingTable
from selfretrieve.model.encoder import crow_descriptors, finalize_descriptors
from selfretrieve.search.diffusion import RankedList, rank_from_scores
from selfretrieve.search.manifest import DatasetManifest, Role
from selfretrieve.util.parallel import parallel_map

if TYPE_CHECKING:
    from collections.abc import Collection, Iterable, Mapping, Sequence

    from selfretrieve.model.encoder import EncoderParams
    from selfretrieve.search.manifest import ManifestEntry, QueryAnnotation

log = logging.getLogger(__name__)
log.setLevel(os.getenv("SELFRETRIEVE_LOG_EVALUATE", "NOTSET"))

UNLABELED = "__unlabeled__"


class EvalSetting(Enum):
    MEDIUM = "medium"
    HARD = "hard"

    def positives(self, annotation: QueryAnnotation) -> frozenset[str]:
        if self is EvalSetting.MEDIUM:
            return annotation.easy | annotation.hard
        return annotation.hard

    def ignore(self, annotation: QueryAnnotation) -> frozenset[str]:
        if self is EvalSetting.MEDIUM:
            return annotation.unclear | annotation.junk
        return annotation.easy | annotation.unclear | annotation.junk


@dataclass
class EvalConfig:
    settings: tuple[str, ...] = ("medium", "hard")
    # Longer side of whole images at descriptor extraction
    image_side: int = 96
    cross_distractors: int = 0
    split_ratio: float = 0.5
    seed: int | None = None

    def __post_init__(self) -> None:
        self.settings = tuple(self.settings)
        for name in self.settings:
            if name not in {s.value for s in EvalSetting}:
                raise ConfigurationError(f"unknown setting {name!r}", "eval.settings")
        if self.image_side < 8:
            raise ConfigurationError("image side must be at least 8", "eval.image_side")
        if self.cross_distractors < 0:
            raise ConfigurationError("distractor count must be non-negative", "eval.cross_distractors")
        if not 0 < self.split_ratio < 1:
            raise ConfigurationError("split ratio must lie in (0, 1)", "eval.split_ratio")


def extract_descriptors(
    params: EncoderParams,
    manifest: DatasetManifest,
    variant: str = "initial",
    side: int | None = None,
    entries: Iterable[ManifestEntry] | None = None,
) -> EmbeddingTable:
    """Whole-image descriptors for every entry of the manifest, or for ``entries`` when given.

    Each image is resized so that its longer side equals ``side`` before extraction.
    """
    entries = list(manifest.entries if entries is None else entries)
    if variant == "boosted" and not params.has_boost:
        raise ConfigurationError("boosted descriptors requested but the checkpoint has no boost layer")

    def pooled(entry: ManifestEntry) -> np.ndarray:
        image = manifest.load_image(entry)
        if side is not None:
            image = resize_longer_side(image, side)
        return crow_descriptors(params, [image])[0]

    vectors = parallel_map(pooled, entries)
    descriptors = finalize_descriptors(params, np.stack(vectors), variant)
    return EmbeddingTable([entry.id for entry in entries], descriptors)


def rank_all(table: EmbeddingTable, query: str, database: Sequence[str]) -> RankedList:
    """All ``database`` ids by ascending Euclidean distance to ``query``, ties by id."""
    if query not in table:
        raise DatasetError(f"Unknown query: {query}")

    candidates = [image_id for image_id in database if image_id != query]
    vectors = table.subset(candidates).vectors.astype(np.float64)
    distances = np.linalg.norm(vectors - table[query].astype(np.float64), axis=1)
    return rank_from_scores(candidates, -distances, len(candidates))


def average_precision(ranked: Sequence[str], positives: Collection[str], ignore: Collection[str] = ()) -> float:
    """Mean over positives of the precision at each positive hit, after deleting ignored ids.

    Positives missing from the ranking contribute zero.

    Raises:
        ValueError: If no positives remain after removing ignored ids.
    """
    ignore = set(ignore)
    positives = set(positives) - ignore
    if not positives:
        raise ValueError("No positives to evaluate")

    hits = 0
    total = 0.0
    rank = 0
    for image_id in ranked:
        if image_id in ignore:
            continue
        rank += 1
        if image_id in positives:
            hits += 1
            total += hits / rank
    return total / len(positives)


@dataclass
class EvalResult:
    setting: str
    map: float
    per_query: list[tuple[str, float]] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "setting": self.setting,
            "mAP": self.map,
            "per_query": [{"id": query, "ap": ap} for query, ap in self.per_query],
        }


def database_ids(manifest: DatasetManifest) -> list[str]:
    return [entry.id for entry in manifest.with_role(Role.DATABASE, Role.DISTRACTOR)]


def evaluate(table: EmbeddingTable, manifest: DatasetManifest, setting: EvalSetting | str) -> EvalResult:
    """Mean average precision over the annotated queries of the manifest.

    Queries whose positive set is empty under the setting are skipped with a warning.

    Raises:
        DatasetError: If no query can be evaluated.
    """
    setting = EvalSetting(setting)
    database = [image_id for image_id in database_ids(manifest) if image_id in table]

    result = EvalResult(setting.value, 0.0)
    for query in sorted(manifest.annotations):
        annotation = manifest.annotations[query]
        ranked = rank_all(table, query, database)
        try:
            ap = average_precision(ranked.ids, setting.positives(annotation), setting.ignore(annotation))
        except ValueError:
            log.warning("Skipping query %s: no %s positives", query, setting.value)
            result.skipped.append(query)
            continue
        result.per_query.append((query, ap))

    if not result.per_query:
        raise DatasetError(f"No valid queries for the {setting.value} setting")

    result.map = float(np.mean([ap for _, ap in result.per_query]))
    log.info("%s mAP %.4f over %d queries", setting.value, result.map, len(result.per_query))
    return result


@dataclass
class CrossDistractorResult:
    map: float
    per_class: dict[str, float]

    def to_dict(self) -> dict:
        return {"setting": "cross-distractor", "mAP": self.map, "per_class": dict(sorted(self.per_class.items()))}


def evaluate_cross_distractor(
    main: DatasetManifest, distractors: DatasetManifest, table: EmbeddingTable
) -> CrossDistractorResult:
    """Per-class retrieval against an external distractor set.

    Every labeled main image queries the union of both collections. Images of its own class are
    positives, all other main images are junk and the distractors are the negatives. Per class APs are
    averaged first, so classes are weighted equally. Classes with fewer than two images are skipped.
    """
    classes = defaultdict(list)
    for entry in main:
        if entry.label is not None:
            classes[entry.label].append(entry.id)

    main_ids = [entry.id for entry in main]
    database = main_ids + [entry.id for entry in distractors]

    per_class = {}
    for label, members in sorted(classes.items()):
        if len(members) < 2:
            log.warning("Skipping class %s with %d image", label, len(members))
            continue

        member_set = set(members)
        aps = []
        for query in members:
            positives = member_set - {query}
            junk = set(main_ids) - member_set
            ranked = rank_all(table, query, database)
            aps.append(average_precision(ranked.ids, positives, junk))
        per_class[label] = float(np.mean(aps))

    if not per_class:
        raise DatasetError("No class with at least two images")
    return CrossDistractorResult(float(np.mean(list(per_class.values()))), per_class)


def split_train_test(manifest: DatasetManifest, ratio: float, seed: int) -> tuple[DatasetManifest, DatasetManifest]:
    """Stratified split of the non-query images, class by class.

    Unlabeled images form a class of their own. Queries go to the test manifest, with their annotations
    restricted to test images. A class with a single image goes to the train manifest.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"Split ratio must lie in (0, 1), got {ratio}")

    classes = defaultdict(list)
    for entry in manifest:
        if entry.role is not Role.QUERY:
            classes[entry.label if entry.label is not None else UNLABELED].append(entry.id)

    rng = np.random.default_rng(seed)
    train = set()
    for label in sorted(classes):
        members = classes[label]
        if len(members) == 1:
            log.warning("Class %s has a single image, assigning it to the train split", label)
            train.update(members)
            continue
        count = min(len(members) - 1, max(1, int(ratio * len(members) + 0.5)))
        order = rng.permutation(len(members))
        train.update(members[i] for i in order[:count])

    test = {entry.id for entry in manifest if entry.id not in train}
    annotations = {
        query: annotation.restrict(test) for query, annotation in manifest.annotations.items() if query in test
    }
    return manifest.subset(train), manifest.subset(test, annotations)


def evaluate_generalization(
    models: Mapping[str, EncoderParams],
    tests: Mapping[str, DatasetManifest],
    settings: Iterable[EvalSetting | str] = (EvalSetting.MEDIUM, EvalSetting.HARD),
    variant: str = "initial",
    side: int | None = None,
) -> dict[str, dict[str, dict[str, float]]]:
    """mAP of every trained model on every test manifest: ``{model: {test: {setting: mAP}}}``."""
    settings = [EvalSetting(s) for s in settings]
    matrix = {}
    for model_name, params in models.items():
        matrix[model_name] = {}
        for test_name, manifest in tests.items():
            table = extract_descriptors(params, manifest, variant, side)
            matrix[model_name][test_name] = {s.value: evaluate(table, manifest, s).map for s in settings}
    return matrix


def write_report(path: Path | str, report: dict) -> None:
    """Write a report as JSON with sorted keys, so equal reports are byte-identical."""
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")


def write_summary(path: Path | str, rows: Iterable[tuple[str, str, float]]) -> None:
    """Write ``(variant, setting, mAP)`` rows as CSV."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "setting", "mAP"])
        writer.writerows((variant, setting, f"{value:.6f}") for variant, setting, value in rows)
