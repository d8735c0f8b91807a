from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING

from selfretrieve.exceptions import DatasetError, MissingArtifactError
from selfretrieve.image.netpbm import read_image

if TYPE_CHECKING:
    from collections.abc import Iterable, Iterator

    from selfretrieve.image.image import Image

log = logging.getLogger(__name__)
log.setLevel(os.getenv("SELFRETRIEVE_LOG_MANIFEST", "NOTSET"))


class Role(Enum):
    DATABASE = "database"
    QUERY = "query"
    DISTRACTOR = "distractor"


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    role: Role = Role.DATABASE
    label: str | None = None
    # Ground truth (x, y, w, h) of the labeled instance, when known
    box: tuple[int, int, int, int] | None = None

    def to_dict(self) -> dict:
        record = {"id": self.id, "path": self.path, "role": self.role.value, "label": self.label}
        if self.box is not None:
            record["box"] = list(self.box)
        return record

    @classmethod
    def from_dict(cls, record: dict) -> ManifestEntry:
        box = record.get("box")
        return cls(
            id=record["id"],
            path=record["path"],
            role=Role(record.get("role", "database")),
            label=record.get("label"),
            box=tuple(box) if box is not None else None,
        )


@dataclass(frozen=True)
class QueryAnnotation:
    """Difficulty classes of the database images relevant to one query."""

    easy: frozenset[str] = field(default_factory=frozenset)
    hard: frozenset[str] = field(default_factory=frozenset)
    unclear: frozenset[str] = field(default_factory=frozenset)
    junk: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        for name in ("easy", "hard", "unclear", "junk"):
            object.__setattr__(self, name, frozenset(getattr(self, name)))

    @property
    def ids(self) -> frozenset[str]:
        return self.easy | self.hard | self.unclear | self.junk

    def restrict(self, ids: set[str] | frozenset[str]) -> QueryAnnotation:
        return QueryAnnotation(self.easy & ids, self.hard & ids, self.unclear & ids, self.junk & ids)

    def to_dict(self) -> dict[str, list[str]]:
        return {name: sorted(getattr(self, name)) for name in ("easy", "hard", "unclear", "junk")}

    @classmethod
    def from_dict(cls, record: dict) -> QueryAnnotation:
        return cls(**{name: frozenset(record.get(name, ())) for name in ("easy", "hard", "unclear", "junk")})


def annotations_path(path: Path) -> Path:
    """The annotation file that accompanies a manifest: ``name.jsonl`` -> ``name.annotations.json``."""
    return path.with_suffix(".annotations.json")


class DatasetManifest:
    """Images of a retrieval dataset with their roles, instance labels and per-query annotations.

    Args:
        entries: The images, in a stable order.
        annotations: Query annotations keyed by query id.
        root: Directory against which relative image paths are resolved.
    """

    def __init__(
        self,
        entries: Iterable[ManifestEntry],
        annotations: dict[str, QueryAnnotation] | None = None,
        root: Path | None = None,
    ):
        self.entries = list(entries)
        self.annotations = dict(annotations or {})
        self.root = root
        self.index = {}
        self.validate()

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.index

    def __getitem__(self, image_id: str) -> ManifestEntry:
        return self.entries[self.index[image_id]]

    def validate(self) -> None:
        """Check that ids are unique, annotations reference known ids and no query is its own positive.

        Raises:
            DatasetError: On the first violation found.
        """
        self.index = {}
        for i, entry in enumerate(self.entries):
            if entry.id in self.index:
                raise DatasetError(f"Duplicate id in manifest: {entry.id}")
            self.index[entry.id] = i

        for query, annotation in self.annotations.items():
            if query not in self.index:
                raise DatasetError(f"Annotation for unknown query: {query}")
            unknown = sorted(annotation.ids - self.index.keys())
            if unknown:
                raise DatasetError(f"Annotation of {query} references unknown ids: {unknown[:5]}")
            if query in annotation.easy or query in annotation.hard:
                raise DatasetError(f"Query {query} is annotated as its own positive")

    def with_role(self, *roles: Role) -> list[ManifestEntry]:
        return [entry for entry in self.entries if entry.role in roles]

    @property
    def database(self) -> list[ManifestEntry]:
        return self.with_role(Role.DATABASE)

    @property
    def queries(self) -> list[ManifestEntry]:
        return self.with_role(Role.QUERY)

    @property
    def distractors(self) -> list[ManifestEntry]:
        return self.with_role(Role.DISTRACTOR)

    def learning_entries(self, include_distractors: bool = False) -> list[ManifestEntry]:
        """Images that may take part in representation learning; queries never do."""
        roles = (Role.DATABASE, Role.DISTRACTOR) if include_distractors else (Role.DATABASE,)
        return self.with_role(*roles)

    def labels(self) -> dict[str, str]:
        return {entry.id: entry.label for entry in self.entries if entry.label is not None}

    def resolve(self, entry: ManifestEntry) -> Path:
        path = Path(entry.path)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path

    def load_image(self, entry: ManifestEntry | str) -> Image:
        if isinstance(entry, str):
            entry = self[entry]
        path = self.resolve(entry)
        if not path.exists():
            raise MissingArtifactError(path)
        return read_image(path)

    def subset(self, ids: Iterable[str], annotations: dict[str, QueryAnnotation] | None = None) -> DatasetManifest:
        keep = set(ids)
        return DatasetManifest(
            [entry for entry in self.entries if entry.id in keep],
            annotations if annotations is not None else {},
            self.root,
        )

    @classmethod
    def load(cls, path: Path | str) -> DatasetManifest:
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(path)

        with path.open() as fh:
            entries = [ManifestEntry.from_dict(json.loads(line)) for line in fh if line.strip()]

        annotations = {}
        sibling = annotations_path(path)
        if sibling.exists():
            annotations = {
                query: QueryAnnotation.from_dict(record) for query, record in json.loads(sibling.read_text()).items()
            }
        else:
            log.debug("No annotations found next to %s", path)

        return cls(entries, annotations, path.parent)

    def save(self, path: Path | str) -> None:
        path = Path(path)
        with path.open("w") as fh:
            fh.writelines(json.dumps(entry.to_dict(), sort_keys=True) + "\n" for entry in self.entries)

        annotations = {query: annotation.to_dict() for query, annotation in sorted(self.annotations.items())}
        annotations_path(path).write_text(json.dumps(annotations, sort_keys=True, indent=1) + "\n")
