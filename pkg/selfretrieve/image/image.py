from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class Image:
    """An immutable raster of 8-bit samples.

    Args:
        pixels: A ``(height, width, channels)`` array of ``uint8`` samples, with 1 or 3 channels.
    """

    pixels: np.ndarray

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        if pixels.ndim != 3 or pixels.shape[2] not in (1, 3):
            raise ValueError(f"Invalid pixel array shape: {pixels.shape}")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ValueError(f"Invalid image dimensions: {pixels.shape[1]}x{pixels.shape[0]}")
        if pixels.dtype != np.uint8:
            raise ValueError(f"Invalid sample type: {pixels.dtype}")

        pixels = np.array(pixels, order="C")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    def __repr__(self) -> str:
        return f"<Image {self.width}x{self.height}x{self.channels}>"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Image):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)

    __hash__ = None

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @classmethod
    def from_samples(cls, width: int, height: int, channels: int, samples: bytes | list[int]) -> Image:
        """Build an image from a row-major, channel-interleaved sample buffer."""
        buf = np.frombuffer(bytes(samples), dtype=np.uint8)
        if buf.size != width * height * channels:
            raise ValueError(f"Expected {width * height * channels} samples, got {buf.size}")
        return cls(buf.reshape(height, width, channels))

    @classmethod
    def from_float(cls, data: np.ndarray) -> Image:
        """Build an image from samples in [0, 1], rounding to the nearest 8-bit level."""
        return cls(to_uint8(np.asarray(data) * 255.0))

    def samples(self) -> bytes:
        return self.pixels.tobytes()

    def as_float(self, dtype: type = np.float32) -> np.ndarray:
        """Return the samples as a ``(height, width, channels)`` array in [0, 1]."""
        return self.pixels.astype(dtype) / dtype(255.0)

    def crop(self, x: int, y: int, w: int, h: int) -> Image:
        if x < 0 or y < 0 or w < 1 or h < 1 or x + w > self.width or y + h > self.height:
            raise ValueError(f"Crop ({x}, {y}, {w}, {h}) outside {self.width}x{self.height} image")
        return Image(self.pixels[y : y + h, x : x + w])

    def resize(self, width: int, height: int) -> Image:
        """Bilinear resize to exactly ``width`` x ``height``."""
        if width < 1 or height < 1:
            raise ValueError(f"Invalid target size: {width}x{height}")
        if (width, height) == (self.width, self.height):
            return self
        return Image(to_uint8(bilinear(self.pixels.astype(np.float64), height, width)))

    def mirror(self) -> Image:
        return Image(self.pixels[:, ::-1])


def to_uint8(data: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(data), 0, 255).astype(np.uint8)


def bilinear(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear interpolation of a ``(H, W, C)`` array with pixel-center alignment and edge clamping."""
    in_h, in_w = data.shape[:2]

    ys = np.clip((np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5, 0, in_h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5, 0, in_w - 1)

    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]

    top = data[y0][:, x0] * (1 - wx) + data[y0][:, x1] * wx
    bottom = data[y1][:, x0] * (1 - wx) + data[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def resize_longer_side(image: Image, target: int) -> Image:
    """Resize so that the longer side equals ``target``, preserving the aspect ratio to the nearest pixel."""
    if target < 1:
        raise ValueError(f"Invalid target side: {target}")

    longer = max(image.width, image.height)
    width = max(1, int(image.width * target / longer + 0.5))
    height = max(1, int(image.height * target / longer + 0.5))
    return image.resize(width, height)
