from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from scipy.ndimage import sobel

from selfretrieve.exceptions import ConfigurationError, DatasetError

if TYPE_CHECKING:
    from collections.abc import Iterable, Iterator, Mapping

    from selfretrieve.image.image import Image

log = logging.getLogger(__name__)
log.setLevel(os.getenv("SELFRETRIEVE_LOG_PROPOSALS", "NOTSET"))

GENERATORS = ("grid", "edge", "whole")

# Minimum overlap between consecutive grid regions, as a fraction of region area
GRID_OVERLAP = 0.4

WINDOW_STEPS = 5
WINDOW_RANGE = (0.25, 0.9)
WINDOW_ASPECTS = (1.0, 2.0, 0.5)
WINDOW_STRIDE = 0.25


@dataclass(frozen=True)
class Region:
    image_id: str
    x: int
    y: int
    w: int
    h: int
    score: float = 1.0
    generator: str = "grid"

    def __post_init__(self) -> None:
        if self.w < 1 or self.h < 1 or self.x < 0 or self.y < 0:
            raise ValueError(f"Invalid region: {self}")

    @property
    def box(self) -> tuple[int, int, int, int]:
        return self.x, self.y, self.w, self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def inside(self, width: int, height: int) -> bool:
        return self.x + self.w <= width and self.y + self.h <= height

    def union(self, other: Region) -> Region:
        x0, y0 = min(self.x, other.x), min(self.y, other.y)
        x1 = max(self.x + self.w, other.x + other.w)
        y1 = max(self.y + self.h, other.y + other.h)
        return replace(self, x=x0, y=y0, w=x1 - x0, h=y1 - y0, score=max(self.score, other.score))

    def crop(self, image: Image) -> Image:
        return image.crop(self.x, self.y, self.w, self.h)


@dataclass
class ProposalConfig:
    generator: str = "grid"
    scale: int = 6
    merge_iou: float = 0.95
    min_side: int = 16
    max_regions: int = 64
    nms_iou: float = 0.5

    def __post_init__(self) -> None:
        if self.generator not in GENERATORS:
            raise ConfigurationError(f"unknown generator {self.generator!r}", "proposals.generator")
        if self.scale < 1:
            raise ConfigurationError("scale must be positive", "proposals.scale")
        for name in ("merge_iou", "nms_iou"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigurationError("threshold must lie in [0, 1]", f"proposals.{name}")
        if self.min_side < 1:
            raise ConfigurationError("min side must be positive", "proposals.min_side")
        if self.max_regions < 1:
            raise ConfigurationError("max regions must be positive", "proposals.max_regions")


def iou(a: tuple[int, int, int, int] | Region, b: tuple[int, int, int, int] | Region) -> float:
    """Intersection over union of two ``(x, y, w, h)`` boxes."""
    ax, ay, aw, ah = a.box if isinstance(a, Region) else a
    bx, by, bw, bh = b.box if isinstance(b, Region) else b

    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def _axis_offsets(length: int, side: int) -> list[int]:
    # The smallest count n with a spacing (length - side) / (n - 1) of at most (1 - GRID_OVERLAP) * side
    if side >= length:
        return [0]
    travel = length - side
    n = 2
    while travel / (n - 1) > (1 - GRID_OVERLAP) * side:
        n += 1
    return sorted({round(i * travel / (n - 1)) for i in range(n)})


def grid_partition(image: Image, scale: int, image_id: str = "") -> list[Region]:
    """Square regions over ``scale`` levels, with the side at level ``s`` equal to ``2 * min(W, H) / (s + 1)``.

    Along each axis regions are placed at uniform spacing so that consecutive regions overlap by at
    least 40% of their area.
    """
    if scale < 1:
        raise ValueError(f"Invalid grid scale: {scale}")

    shorter = min(image.width, image.height)
    seen = set()
    regions = []
    for s in range(1, scale + 1):
        side = max(1, min(shorter, (2 * shorter) // (s + 1)))
        for y in _axis_offsets(image.height, side):
            for x in _axis_offsets(image.width, side):
                if (x, y, side) in seen:
                    continue
                seen.add((x, y, side))
                regions.append(Region(image_id, x, y, side, side, 1.0, "grid"))
    return regions


def whole_image(image: Image, image_id: str = "") -> list[Region]:
    return [Region(image_id, 0, 0, image.width, image.height, 1.0, "whole")]


def edge_magnitude(image: Image) -> np.ndarray:
    """Sobel gradient magnitude of the luma of ``image``."""
    data = image.as_float(np.float64)
    gray = data[:, :, 0] if image.channels == 1 else data @ np.array([0.299, 0.587, 0.114])
    return np.hypot(sobel(gray, axis=1, mode="reflect"), sobel(gray, axis=0, mode="reflect"))


class IntegralImage:
    def __init__(self, data: np.ndarray):
        self.height, self.width = data.shape
        self.table = np.zeros((self.height + 1, self.width + 1))
        self.table[1:, 1:] = data.cumsum(axis=0).cumsum(axis=1)

    def sum(self, x0: int, y0: int, x1: int, y1: int) -> float:
        t = self.table
        return float(t[y1, x1] - t[y0, x1] - t[y1, x0] + t[y0, x0])


def _window_positions(length: int, size: int, stride: int) -> list[int]:
    positions = list(range(0, length - size + 1, stride))
    if positions[-1] != length - size:
        positions.append(length - size)
    return positions


def window_lattice(width: int, height: int) -> Iterator[tuple[int, int, int, int]]:
    """Candidate windows: geometric side steps times aspect ratios, slid with a stride of a quarter side."""
    shorter = min(width, height)
    for side in np.geomspace(WINDOW_RANGE[0] * shorter, WINDOW_RANGE[1] * shorter, WINDOW_STEPS):
        for aspect in WINDOW_ASPECTS:
            w = min(width, max(1, round(side * math.sqrt(aspect))))
            h = min(height, max(1, round(side / math.sqrt(aspect))))
            stride = max(1, int(WINDOW_STRIDE * side))
            for y in _window_positions(height, h, stride):
                for x in _window_positions(width, w, stride):
                    yield x, y, w, h


def edge_score(integral: IntegralImage, x: int, y: int, w: int, h: int) -> float:
    """Mean edge magnitude inside the box minus the mean over a surrounding band, clipped to the image."""
    inner = integral.sum(x, y, x + w, y + h)
    band = max(2, int(0.1 * min(w, h)))
    x0, y0 = max(0, x - band), max(0, y - band)
    x1, y1 = min(integral.width, x + w + band), min(integral.height, y + h + band)

    band_area = (x1 - x0) * (y1 - y0) - w * h
    band_mean = (integral.sum(x0, y0, x1, y1) - inner) / band_area if band_area else 0.0
    return inner / (w * h) - band_mean


def non_maximum_suppression(regions: list[Region], threshold: float) -> list[Region]:
    keep = []
    for region in sorted(regions, key=lambda r: (-r.score, r.x, r.y, r.w, r.h)):
        if all(iou(region, kept) < threshold for kept in keep):
            keep.append(region)
    return keep


def edge_density_proposals(image: Image, cfg: ProposalConfig, image_id: str = "") -> list[Region]:
    """Score a window lattice by enclosed edge density and keep the best non-overlapping windows.

    A window only qualifies with a positive score, so an image without gradients yields no proposals.
    """
    if image.width < 8 or image.height < 8:
        raise ValueError(f"Image too small for edge proposals: {image.width}x{image.height}")

    integral = IntegralImage(edge_magnitude(image))
    candidates = []
    for box in dict.fromkeys(window_lattice(image.width, image.height)):
        score = edge_score(integral, *box)
        # Ignore floating point residue of integral image differences
        if score > 1e-9:
            candidates.append(Region(image_id, *box, score, "edge"))

    regions = non_maximum_suppression(candidates, cfg.nms_iou)[: cfg.max_regions]
    log.debug("Edge proposals for %s: %d candidates, %d kept", image_id, len(candidates), len(regions))
    return regions


def merge_and_filter(regions: Iterable[Region], cfg: ProposalConfig) -> list[Region]:
    """Merge overlapping regions into their union until no pair reaches ``merge_iou``, then drop small ones.

    Merging is transitive: a merged region is compared again against all remaining regions. The output is
    sorted by descending score, then by position.
    """
    pending = list(regions)
    merged = True
    while merged:
        merged = False
        for i in range(len(pending)):
            for j in range(i + 1, len(pending)):
                if iou(pending[i], pending[j]) >= cfg.merge_iou:
                    pending[i] = pending[i].union(pending[j])
                    del pending[j]
                    merged = True
                    break
            if merged:
                break

    kept = [r for r in pending if min(r.w, r.h) >= cfg.min_side]
    return sorted(kept, key=lambda r: (-r.score, r.x, r.y, r.w, r.h))


def propose(image: Image, cfg: ProposalConfig, image_id: str = "") -> list[Region]:
    """Run the configured generator followed by :func:`merge_and_filter`."""
    if cfg.generator == "grid":
        regions = grid_partition(image, cfg.scale, image_id)
    elif cfg.generator == "edge":
        regions = edge_density_proposals(image, cfg, image_id)
    else:
        regions = whole_image(image, image_id)

    if cfg.generator == "whole":
        return regions
    return merge_and_filter(regions, cfg)[: cfg.max_regions]


def write_regions(path: Path | str, regions: Iterable[Region]) -> int:
    count = 0
    with Path(path).open("w") as fh:
        for region in regions:
            fh.write(json.dumps(asdict(region), sort_keys=True) + "\n")
            count += 1
    return count


def validate_regions(regions: Iterable[Region], sizes: Mapping[str, tuple[int, int]]) -> None:
    """Check that every region with a known ``(width, height)`` lies inside its image.

    Raises:
        DatasetError: On the first region reaching past the image border.
    """
    for region in regions:
        size = sizes.get(region.image_id)
        if size is not None and not region.inside(*size):
            raise DatasetError(f"Region {region.box} lies outside image {region.image_id} of size {size}")


def read_regions(path: Path | str, sizes: Mapping[str, tuple[int, int]] | None = None) -> list[Region]:
    with Path(path).open() as fh:
        regions = [Region(**json.loads(line)) for line in fh if line.strip()]
    if sizes is not None:
        validate_regions(regions, sizes)
    return regions
