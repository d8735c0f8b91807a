"""Deterministic synthetic instance retrieval datasets.

Every class is a procedurally drawn template: a shape filled with a two-color pattern. Database images
show one labeled instance of a class at a random scale and rotation, optionally surrounded by smaller
instances of other classes, over a noise background. One additional query image per class shows the
instance in an easy placement. Placement decides the difficulty annotation: instances that are small or
largely cut off by the frame are hard positives, all others are easy.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from selfretrieve.exceptions import ConfigurationError
from selfretrieve.image.image import Image, bilinear
from selfretrieve.image.netpbm import write_image
from selfretrieve.search.manifest import DatasetManifest, ManifestEntry, QueryAnnotation, Role
from selfretrieve.util.parallel import parallel_map

log = logging.getLogger(__name__)
log.setLevel(os.getenv("SELFRETRIEVE_LOG_SYNTHGEN", "NOTSET"))

TEMPLATE_SIDE = 64
SHAPES = ("ellipse", "rectangle", "triangle", "diamond", "cross", "ring")
PATTERNS = ("hstripes", "vstripes", "diagonal", "checker", "dots", "rings")

EASY_SCALE = (0.35, 0.6)
SMALL_SCALE = 0.12
SECONDARY_SCALE = (0.15, 0.3)
MAX_ROTATION = 30.0
MAX_CROP = 0.5
NOISE_GRID = 6

# Streams of the per-image random generators
_TEMPLATES, _DATABASE, _QUERY, _DISTRACTOR = range(4)


@dataclass
class SynthConfig:
    classes: int = 10
    instances: int = 20
    side: int = 96
    objects: tuple[int, int] = (1, 3)
    clutter: float = 0.5
    distractors: int = 50
    seed: int | None = 42
    # An instance smaller than this fraction of the side is hard
    hard_scale: float = 0.25
    # An instance with more than this fraction outside the frame is hard
    hard_crop: float = 0.3
    hard_fraction: float = 0.5

    def __post_init__(self) -> None:
        self.objects = tuple(self.objects)
        if self.classes < 1 or self.instances < 1:
            raise ConfigurationError("class and instance counts must be at least 1", "synth.classes")
        if self.side < 64:
            raise ConfigurationError("image side must be at least 64", "synth.side")
        if len(self.objects) != 2 or not 1 <= self.objects[0] <= self.objects[1]:
            raise ConfigurationError("objects must be a range (min, max) with 1 <= min <= max", "synth.objects")
        if not 0 <= self.clutter <= 1:
            raise ConfigurationError("clutter must lie in [0, 1]", "synth.clutter")
        if self.distractors < 0:
            raise ConfigurationError("distractor count must be non-negative", "synth.distractors")
        if not SMALL_SCALE < self.hard_scale <= EASY_SCALE[0]:
            raise ConfigurationError(
                f"hard scale must lie in ({SMALL_SCALE}, {EASY_SCALE[0]}]", "synth.hard_scale"
            )
        if not 0 < self.hard_crop < MAX_CROP:
            raise ConfigurationError(f"hard crop must lie in (0, {MAX_CROP})", "synth.hard_crop")
        if not 0 <= self.hard_fraction <= 1:
            raise ConfigurationError("hard fraction must lie in [0, 1]", "synth.hard_fraction")


class Template(NamedTuple):
    shape: str
    pattern: str
    colors: np.ndarray
    mask: np.ndarray


class Placement(NamedTuple):
    box: tuple[int, int, int, int]
    hard: bool


def _template_mask(shape: str, rng: np.random.Generator) -> np.ndarray:
    coords = (np.arange(TEMPLATE_SIDE) + 0.5) / TEMPLATE_SIDE * 2 - 1
    u, v = np.meshgrid(coords, coords)
    aspect = rng.uniform(0.6, 1.0)

    if shape == "ellipse":
        return (u / 0.95) ** 2 + (v / (0.95 * aspect)) ** 2 <= 1
    if shape == "rectangle":
        return (np.abs(u) <= 0.9) & (np.abs(v) <= 0.9 * aspect)
    if shape == "triangle":
        return (v >= -0.9) & (v <= 0.9) & (np.abs(u) <= (0.9 - v) / 2 * aspect + 0.05)
    if shape == "diamond":
        return np.abs(u) + np.abs(v) / aspect <= 0.95
    if shape == "cross":
        arm = 0.3 * aspect + 0.1
        return ((np.abs(u) <= arm) | (np.abs(v) <= arm)) & (np.abs(u) <= 0.95) & (np.abs(v) <= 0.95)
    radius = np.hypot(u, v)
    return (radius <= 0.95) & (radius >= 0.35 * aspect + 0.1)


def _template_pattern(pattern: str, period: float, rng: np.random.Generator) -> np.ndarray:
    y, x = np.mgrid[0:TEMPLATE_SIDE, 0:TEMPLATE_SIDE].astype(np.float64)
    phase = rng.uniform(0, period)

    if pattern == "hstripes":
        return (y + phase) % period < period / 2
    if pattern == "vstripes":
        return (x + phase) % period < period / 2
    if pattern == "diagonal":
        return (x + y + phase) % period < period / 2
    if pattern == "checker":
        return ((x // (period / 2)) + (y // (period / 2))) % 2 == 0
    if pattern == "dots":
        dx = (x + phase) % period - period / 2
        dy = (y + phase) % period - period / 2
        return np.hypot(dx, dy) <= period / 4
    center = TEMPLATE_SIDE / 2
    return np.hypot(x - center, y - center) % period < period / 2


def make_template(rng: np.random.Generator, shape: str | None = None, pattern: str | None = None) -> Template:
    shape = shape or SHAPES[rng.integers(len(SHAPES))]
    pattern = pattern or PATTERNS[rng.integers(len(PATTERNS))]

    primary = rng.uniform(0.1, 0.95, 3)
    secondary = rng.uniform(0.1, 0.95, 3)
    # Keep the two colors of the pattern apart
    while np.abs(primary - secondary).max() < 0.35:
        secondary = rng.uniform(0.1, 0.95, 3)

    mask = _template_mask(shape, rng)
    stripes = _template_pattern(pattern, rng.uniform(8, 16), rng)
    colors = np.where(stripes[:, :, None], secondary, primary)
    return Template(shape, pattern, colors, mask)


def make_templates(cfg: SynthConfig) -> list[Template]:
    """One template per class; shapes and patterns are cycled so that neighbouring classes differ."""
    rng = np.random.default_rng([cfg.seed or 0, _TEMPLATES])
    return [
        make_template(rng, SHAPES[c % len(SHAPES)], PATTERNS[(c + c // len(SHAPES)) % len(PATTERNS)])
        for c in range(cfg.classes)
    ]


def background(side: int, clutter: float, rng: np.random.Generator) -> np.ndarray:
    """A flat color perturbed by low frequency value noise and fine grain, both scaled by ``clutter``."""
    base = rng.uniform(0.25, 0.75, 3)
    coarse = rng.uniform(-1, 1, (NOISE_GRID, NOISE_GRID, 3))
    grain = rng.normal(0, 1, (side, side, 3))
    canvas = base + clutter * (0.35 * bilinear(coarse, side, side) + 0.05 * grain)
    return np.clip(canvas, 0, 1)


def _render(template: Template, size: int, angle: float) -> tuple[np.ndarray, np.ndarray]:
    colors = bilinear(template.colors, size, size)
    mask = bilinear(template.mask[:, :, None].astype(np.float64), size, size)[:, :, 0]

    colors = ndimage.rotate(colors, angle, axes=(1, 0), reshape=True, order=1, mode="nearest")
    mask = ndimage.rotate(mask, angle, axes=(1, 0), reshape=True, order=1, mode="constant", cval=0.0)
    return np.clip(colors, 0, 1), mask >= 0.5


def paste(
    canvas: np.ndarray, template: Template, size: int, angle: float, x: int, y: int
) -> tuple[int, int, int, int] | None:
    """Composite a scaled and rotated template with its top left corner at ``(x, y)``, clipped to the canvas.

    Returns:
        The bounding box of the visible instance pixels, or ``None`` when nothing is visible.
    """
    colors, mask = _render(template, size, angle)
    h, w = mask.shape
    height, width = canvas.shape[:2]

    x0, y0 = max(0, x), max(0, y)
    x1, y1 = min(width, x + w), min(height, y + h)
    if x0 >= x1 or y0 >= y1:
        return None

    visible = mask[y0 - y : y1 - y, x0 - x : x1 - x]
    target = canvas[y0:y1, x0:x1]
    target[visible] = colors[y0 - y : y1 - y, x0 - x : x1 - x][visible]

    rows = np.flatnonzero(visible.any(axis=1))
    cols = np.flatnonzero(visible.any(axis=0))
    if not rows.size:
        return None
    return int(x0 + cols[0]), int(y0 + rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1)


def _place_main(
    canvas: np.ndarray, template: Template, cfg: SynthConfig, hard: bool, rng: np.random.Generator
) -> Placement:
    side = cfg.side
    angle = rng.uniform(-MAX_ROTATION, MAX_ROTATION)

    if not hard:
        size = int(rng.uniform(*EASY_SCALE) * side)
        x, y = _inside(canvas, template, size, angle, rng)
        return Placement(paste(canvas, template, size, angle, x, y), False)

    if rng.random() < 0.5:
        size = int(rng.uniform(SMALL_SCALE, cfg.hard_scale) * side)
        x, y = _inside(canvas, template, size, angle, rng)
        return Placement(paste(canvas, template, size, angle, x, y), True)

    # Cut off by the frame along one axis
    size = int(rng.uniform(*EASY_SCALE) * side)
    extent = _render(template, size, angle)[1].shape
    cut = rng.uniform(cfg.hard_crop + 0.05, MAX_CROP)
    x, y = _inside(canvas, template, size, angle, rng)
    if rng.random() < 0.5:
        x = -int(cut * extent[1]) if rng.random() < 0.5 else side - extent[1] + int(cut * extent[1])
    else:
        y = -int(cut * extent[0]) if rng.random() < 0.5 else side - extent[0] + int(cut * extent[0])
    return Placement(paste(canvas, template, size, angle, x, y), True)


def _inside(
    canvas: np.ndarray, template: Template, size: int, angle: float, rng: np.random.Generator
) -> tuple[int, int]:
    h, w = _render(template, size, angle)[1].shape
    side = canvas.shape[0]
    return int(rng.integers(0, max(1, side - w + 1))), int(rng.integers(0, max(1, side - h + 1)))


def compose(
    main: Template,
    others: list[Template],
    cfg: SynthConfig,
    rng: np.random.Generator,
    hard: bool = False,
) -> tuple[Image, Placement, list[int]]:
    """Render one image around an instance of ``main``, with secondary instances drawn from ``others``.

    Returns:
        The image, the placement of the main instance and the indices into ``others`` of the secondary
        instances that remained visible.
    """
    canvas = background(cfg.side, cfg.clutter, rng)

    secondary = []
    count = int(rng.integers(cfg.objects[0], cfg.objects[1] + 1)) - 1
    for _ in range(count if others else 0):
        k = int(rng.integers(len(others)))
        size = int(rng.uniform(*SECONDARY_SCALE) * cfg.side)
        angle = rng.uniform(-MAX_ROTATION, MAX_ROTATION)
        x, y = _inside(canvas, others[k], size, angle, rng)
        if paste(canvas, others[k], size, angle, x, y) is not None:
            secondary.append(k)

    placement = _place_main(canvas, main, cfg, hard, rng)
    return Image.from_float(canvas), placement, secondary


def _difficulties(cfg: SynthConfig, rng: np.random.Generator) -> list[bool]:
    # The first two instances of a class are one easy and one hard instance
    hard = [False, True][: cfg.instances]
    hard += list(rng.random(cfg.instances - len(hard)) < cfg.hard_fraction)
    return [bool(h) for h in hard]


def fresh_template(templates: list[Template], rng: np.random.Generator) -> Template:
    """A random template that differs from every class template."""
    while True:
        template = make_template(rng)
        if not any(
            np.array_equal(template.mask, t.mask) and np.array_equal(template.colors, t.colors) for t in templates
        ):
            return template


def class_label(c: int) -> str:
    return f"class{c:02d}"


class _Job(NamedTuple):
    image_id: str
    role: Role
    label: int | None
    key: tuple[int, ...]
    hard: bool


def _draw(job: _Job, templates: list[Template], cfg: SynthConfig) -> tuple[Image, Placement, list[int]]:
    rng = np.random.default_rng(list(job.key))
    if job.label is None:
        main = fresh_template(templates, rng)
        others = [fresh_template(templates, rng) for _ in range(cfg.objects[1] - 1)]
        image, placement, _ = compose(main, others, cfg, rng)
        return image, placement, []

    classes = [c for c in range(len(templates)) if c != job.label]
    image, placement, secondary = compose(templates[job.label], [templates[c] for c in classes], cfg, rng, job.hard)
    return image, placement, [classes[k] for k in secondary]


def generate(cfg: SynthConfig, out_dir: Path | str) -> DatasetManifest:
    """Render the dataset into ``out_dir``: images under ``images/`` plus ``manifest.jsonl`` and its annotations.

    Database images of a query's class are its easy or hard positives. Images showing the class only as a
    secondary instance are junk for that query. The same configuration always produces byte-identical files.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    seed = cfg.seed or 0
    templates = make_templates(cfg)
    plan_rng = np.random.default_rng([seed, _DATABASE])

    jobs = []
    for c in range(cfg.classes):
        difficulty = _difficulties(cfg, plan_rng)
        for i in range(cfg.instances):
            jobs.append(_Job(f"c{c:02d}_{i:03d}", Role.DATABASE, c, (seed, _DATABASE, c, i), difficulty[i]))
        jobs.append(_Job(f"q{c:02d}", Role.QUERY, c, (seed, _QUERY, c), False))
    for j in range(cfg.distractors):
        jobs.append(_Job(f"d{j:04d}", Role.DISTRACTOR, None, (seed, _DISTRACTOR, 0, j), False))

    def render(job: _Job) -> tuple[ManifestEntry, Placement, list[int]]:
        image, placement, secondary = _draw(job, templates, cfg)
        path = f"images/{job.image_id}.ppm"
        write_image(out_dir / path, image)
        if job.label is None:
            return ManifestEntry(job.image_id, path, job.role), placement, secondary
        entry = ManifestEntry(job.image_id, path, job.role, class_label(job.label), placement.box)
        return entry, placement, secondary

    rendered = parallel_map(render, jobs)

    annotations = {}
    for c in range(cfg.classes):
        label = class_label(c)
        easy, hard, junk = set(), set(), set()
        for entry, placement, secondary in rendered:
            if entry.role is not Role.DATABASE:
                continue
            if entry.label == label:
                (hard if placement.hard else easy).add(entry.id)
            elif c in secondary:
                junk.add(entry.id)
        annotations[f"q{c:02d}"] = QueryAnnotation(easy=easy, hard=hard, junk=junk)

    manifest = DatasetManifest([entry for entry, _, _ in rendered], annotations, out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    log.info(
        "Generated %d classes of %d instances and %d distractors in %s",
        cfg.classes,
        cfg.instances,
        cfg.distractors,
        out_dir,
    )
    return manifest


def generate_distractors(cfg: SynthConfig, out_dir: Path | str, count: int, seed: int | None = None) -> DatasetManifest:
    """Render ``count`` unlabeled distractor images into ``out_dir`` with their own ``manifest.jsonl``.

    None of the class templates of ``cfg`` is drawn, so the images show none of the instances.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    seed = (cfg.seed or 0) if seed is None else seed
    templates = make_templates(cfg)

    def render(j: int) -> ManifestEntry:
        job = _Job(f"x{j:05d}", Role.DISTRACTOR, None, (seed, _DISTRACTOR, 1, j), False)
        image, _, _ = _draw(job, templates, cfg)
        path = f"images/{job.image_id}.ppm"
        write_image(out_dir / path, image)
        return ManifestEntry(job.image_id, path, Role.DISTRACTOR)

    manifest = DatasetManifest(parallel_map(render, range(count)), root=out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    log.info("Generated %d cross distractors in %s", count, out_dir)
    return manifest
