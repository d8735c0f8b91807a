from __future__ import annotations

import json
from typing import TYPE_CHECKING

import numpy as np
import pytest

from selfretrieve.exceptions import DatasetError, MissingArtifactError
from selfretrieve.image.image import Image
from selfretrieve.image.netpbm import write_image
from selfretrieve.search.manifest import DatasetManifest, ManifestEntry, QueryAnnotation, Role, annotations_path

if TYPE_CHECKING:
    from pathlib import Path


def small_manifest() -> DatasetManifest:
    entries = [
        ManifestEntry("q0", "q0.pgm", Role.QUERY, "obj", (1, 2, 3, 4)),
        ManifestEntry("d0", "d0.pgm", Role.DATABASE, "obj"),
        ManifestEntry("d1", "d1.pgm", Role.DATABASE, "other"),
        ManifestEntry("x0", "x0.pgm", Role.DISTRACTOR),
    ]
    return DatasetManifest(entries, {"q0": QueryAnnotation(easy={"d0"}, junk={"d1"})})


def test_manifest_roles() -> None:
    manifest = small_manifest()

    assert [e.id for e in manifest.queries] == ["q0"]
    assert [e.id for e in manifest.database] == ["d0", "d1"]
    assert [e.id for e in manifest.distractors] == ["x0"]
    assert [e.id for e in manifest.learning_entries()] == ["d0", "d1"]
    assert [e.id for e in manifest.learning_entries(include_distractors=True)] == ["d0", "d1", "x0"]
    assert manifest.labels() == {"q0": "obj", "d0": "obj", "d1": "other"}
    assert "d1" in manifest and "zz" not in manifest
    assert manifest["q0"].box == (1, 2, 3, 4)


def test_manifest_save_load(tmp_path: Path) -> None:
    manifest = small_manifest()
    manifest.save(tmp_path / "manifest.jsonl")

    assert annotations_path(tmp_path / "manifest.jsonl") == tmp_path / "manifest.annotations.json"
    first = json.loads((tmp_path / "manifest.jsonl").read_text().splitlines()[0])
    assert first == {"box": [1, 2, 3, 4], "id": "q0", "label": "obj", "path": "q0.pgm", "role": "query"}

    loaded = DatasetManifest.load(tmp_path / "manifest.jsonl")
    assert loaded.entries == manifest.entries
    assert loaded.annotations == manifest.annotations
    assert loaded.root == tmp_path


def test_manifest_load_without_annotations(tmp_path: Path) -> None:
    (tmp_path / "plain.jsonl").write_text('{"id": "a", "path": "a.pgm"}\n\n')

    manifest = DatasetManifest.load(tmp_path / "plain.jsonl")

    assert manifest.entries == [ManifestEntry("a", "a.pgm")]
    assert manifest.annotations == {}


def test_manifest_load_image(tmp_path: Path) -> None:
    image = Image(np.arange(6, dtype=np.uint8).reshape(2, 3))
    write_image(tmp_path / "d0.pgm", image)
    manifest = DatasetManifest(small_manifest().entries, root=tmp_path)

    assert manifest.load_image("d0") == image
    with pytest.raises(MissingArtifactError):
        manifest.load_image("d1")
    with pytest.raises(MissingArtifactError):
        DatasetManifest.load(tmp_path / "missing.jsonl")


@pytest.mark.parametrize(
    ("entries", "annotations", "message"),
    [
        ([ManifestEntry("a", "a"), ManifestEntry("a", "b")], {}, "Duplicate"),
        ([ManifestEntry("a", "a")], {"q": QueryAnnotation()}, "unknown query"),
        ([ManifestEntry("q", "q", Role.QUERY)], {"q": QueryAnnotation(hard={"zz"})}, "unknown ids"),
        ([ManifestEntry("q", "q", Role.QUERY)], {"q": QueryAnnotation(easy={"q"})}, "own positive"),
    ],
)
def test_manifest_validation(entries: list[ManifestEntry], annotations: dict, message: str) -> None:
    with pytest.raises(DatasetError, match=message):
        DatasetManifest(entries, annotations)


def test_manifest_subset_and_restrict() -> None:
    manifest = small_manifest()
    annotation = manifest.annotations["q0"]

    subset = manifest.subset(["q0", "d0"], {"q0": annotation.restrict({"d0"})})

    assert [e.id for e in subset] == ["q0", "d0"]
    assert subset.annotations["q0"].easy == {"d0"}
    assert subset.annotations["q0"].junk == frozenset()
    assert manifest.subset(["d1"]).annotations == {}


def test_query_annotation_serialization() -> None:
    annotation = QueryAnnotation(easy=["b", "a"], unclear={"c"})

    assert annotation.to_dict() == {"easy": ["a", "b"], "hard": [], "unclear": ["c"], "junk": []}
    assert QueryAnnotation.from_dict({"easy": ["a", "b"], "unclear": ["c"]}) == annotation
    assert annotation.ids == {"a", "b", "c"}
