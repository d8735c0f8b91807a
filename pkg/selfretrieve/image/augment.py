from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from selfretrieve.exceptions import ConfigurationError
from selfretrieve.image.image import Image

# Sigmas below this are treated as the identity kernel
BLUR_CUTOFF = 1e-3
CROP_ATTEMPTS = 10
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class AugmentConfig:
    """Parameters of the view augmentation: random resized crop, flip, color distortion and blur."""

    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    output_side: int = 32
    seed: int | None = None

    def __post_init__(self) -> None:
        self.crop_scale = tuple(self.crop_scale)
        self.crop_ratio = tuple(self.crop_ratio)
        self.blur_sigma = tuple(self.blur_sigma)

        low, high = self.crop_scale
        if not 0 < low <= high <= 1:
            raise ConfigurationError(f"invalid range {self.crop_scale}", "augment.crop_scale")
        if not 0 < self.crop_ratio[0] <= self.crop_ratio[1]:
            raise ConfigurationError(f"invalid range {self.crop_ratio}", "augment.crop_ratio")
        if not 0 < self.blur_sigma[0] <= self.blur_sigma[1]:
            raise ConfigurationError(f"invalid range {self.blur_sigma}", "augment.blur_sigma")

        for name in ("flip_prob", "jitter_prob", "grayscale_prob", "blur_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigurationError("probability must lie in [0, 1]", f"augment.{name}")
        for name in ("brightness", "contrast"):
            if getattr(self, name) < 0:
                raise ConfigurationError("amplitude must be non-negative", f"augment.{name}")
        if self.output_side < 1:
            raise ConfigurationError("output side must be positive", "augment.output_side")


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian of radius ``ceil(3 * sigma)``."""
    if sigma < BLUR_CUTOFF:
        return np.ones(1)
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(x**2) / (2 * sigma**2))
    return kernel / kernel.sum()


def gaussian_blur(data: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur of a ``(H, W, C)`` float array with reflected borders."""
    kernel = gaussian_kernel(sigma)
    if kernel.size == 1:
        return data
    data = correlate1d(data, kernel, axis=0, mode="reflect")
    return correlate1d(data, kernel, axis=1, mode="reflect")


def random_crop_box(width: int, height: int, cfg: AugmentConfig, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Sample a crop box with area uniform in ``crop_scale`` of the source and log-uniform aspect ratio.

    Samples that do not fit the image are redrawn up to ``CROP_ATTEMPTS`` times, after which the centered
    crop with the aspect ratio clamped into ``crop_ratio`` is used.
    """
    area = width * height
    log_low, log_high = math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1])

    for _ in range(CROP_ATTEMPTS):
        target = area * rng.uniform(*cfg.crop_scale)
        ratio = math.exp(rng.uniform(log_low, log_high))
        w = round(math.sqrt(target * ratio))
        h = round(math.sqrt(target / ratio))
        if 1 <= w <= width and 1 <= h <= height:
            x = int(rng.integers(0, width - w + 1))
            y = int(rng.integers(0, height - h + 1))
            return x, y, w, h

    ratio = width / height
    if ratio < cfg.crop_ratio[0]:
        w, h = width, max(1, round(width / cfg.crop_ratio[0]))
    elif ratio > cfg.crop_ratio[1]:
        w, h = max(1, round(height * cfg.crop_ratio[1])), height
    else:
        w, h = width, height
    return (width - w) // 2, (height - h) // 2, w, h


def augment(image: Image, cfg: AugmentConfig, rng: np.random.Generator) -> Image:
    """Produce one randomly transformed square view of ``image``.

    The output is fully determined by the state of ``rng``.
    """
    if image.width < 2 or image.height < 2:
        raise ValueError(f"Image too small to augment: {image.width}x{image.height}")

    view = image.crop(*random_crop_box(image.width, image.height, cfg, rng))
    view = view.resize(cfg.output_side, cfg.output_side)

    if rng.random() < cfg.flip_prob:
        view = view.mirror()

    jitter = rng.random() < cfg.jitter_prob and (cfg.brightness > 0 or cfg.contrast > 0)
    grayscale = rng.random() < cfg.grayscale_prob
    blur = rng.random() < cfg.blur_prob
    if not (jitter or grayscale or blur):
        return view

    data = view.as_float(np.float64)
    if jitter:
        gain = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast, view.channels)
        bias = rng.uniform(-cfg.brightness, cfg.brightness, view.channels)
        data = np.clip(data * gain + bias, 0.0, 1.0)

    if grayscale and view.channels == 3:
        luma = data @ LUMA_WEIGHTS
        data = np.repeat(luma[:, :, None], 3, axis=2)

    if blur:
        data = gaussian_blur(data, rng.uniform(*cfg.blur_sigma))

    return Image.from_float(data)


def augment_pair(image: Image, cfg: AugmentConfig, rng: np.random.Generator) -> tuple[Image, Image]:
    """Two independently augmented views of the same image."""
    return augment(image, cfg, rng), augment(image, cfg, rng)
