from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np
import pytest

from selfretrieve.exceptions import DecodeError
from selfretrieve.image.image import Image, resize_longer_side
from selfretrieve.image.netpbm import decode_image, encode_image, read_image, write_image
from tests.conftest import random_image

if TYPE_CHECKING:
    from pathlib import Path


def test_netpbm_decode_pgm() -> None:
    image = decode_image(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))

    assert (image.width, image.height, image.channels) == (2, 2, 1)
    assert image.samples() == bytes([0, 255, 128, 64])
    assert image.pixels[1, 0, 0] == 128


def test_netpbm_decode_comments() -> None:
    image = decode_image(b"P6 # comment\n# another\n1 1 255\n" + bytes([1, 2, 3]))

    assert image.channels == 3
    assert image.samples() == bytes([1, 2, 3])


def test_netpbm_unsupported_maxval() -> None:
    with pytest.raises(DecodeError, match="unsupported maxval"):
        decode_image(b"P5\n2 2\n65535\n" + bytes(8))


def test_netpbm_truncated() -> None:
    with pytest.raises(DecodeError, match="Truncated payload") as e:
        decode_image(b"P6\n4 4\n255\n" + bytes(40))

    assert e.value.offset == len(b"P6\n4 4\n255\n") + 40


@pytest.mark.parametrize(
    "buf",
    [
        b"P3\n1 1\n255\n",
        b"P5\n",
        b"P5\nx 1\n255\n\x00",
        b"P5\n0 1\n255\n",
        b"P5\n1 1\n255",
    ],
)
def test_netpbm_malformed(buf: bytes) -> None:
    with pytest.raises(DecodeError):
        decode_image(buf)


def test_netpbm_file(tmp_path: Path, rng: np.random.Generator) -> None:
    image = random_image(rng, 7, 5)
    write_image(tmp_path / "image.ppm", image)

    assert (tmp_path / "image.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    assert read_image(tmp_path / "image.ppm") == image
    assert decode_image(encode_image(image) + b"trailing") == image


def test_image_validation() -> None:
    with pytest.raises(ValueError):
        Image(np.zeros((4, 4, 2), dtype=np.uint8))
    with pytest.raises(ValueError):
        Image(np.zeros((4, 4, 3), dtype=np.float32))
    with pytest.raises(ValueError):
        Image.from_samples(2, 2, 3, bytes(11))

    image = Image(np.zeros((4, 4), dtype=np.uint8))
    assert image.channels == 1
    with pytest.raises(ValueError):
        image.pixels[0, 0, 0] = 1


def test_image_crop_mirror(rng: np.random.Generator) -> None:
    image = random_image(rng, 10, 8)

    crop = image.crop(2, 3, 4, 5)
    assert (crop.width, crop.height) == (4, 5)
    assert np.array_equal(crop.pixels, image.pixels[3:8, 2:6])
    assert np.array_equal(image.mirror().pixels[:, 0], image.pixels[:, -1])
    assert image.mirror().mirror() == image

    with pytest.raises(ValueError):
        image.crop(8, 0, 4, 4)


def test_image_from_float_rounds() -> None:
    image = Image.from_float(np.array([[[0.0], [0.5], [1.2]]]))

    assert image.pixels.ravel().tolist() == [0, 128, 255]


def test_resize_longer_side() -> None:
    wide = Image(np.zeros((50, 100, 3), dtype=np.uint8))
    assert resize_longer_side(wide, 100) is wide

    large = Image(np.zeros((100, 200, 3), dtype=np.uint8))
    resized = resize_longer_side(large, 100)
    assert (resized.width, resized.height) == (100, 50)

    tall = Image(np.zeros((30, 10, 1), dtype=np.uint8))
    resized = resize_longer_side(tall, 60)
    assert (resized.width, resized.height) == (20, 60)


@pytest.mark.parametrize("value", [0, 17, 200, 255])
def test_resize_constant_image(value: int) -> None:
    image = Image(np.full((13, 21, 3), value, dtype=np.uint8))

    for width, height in ((5, 3), (40, 40), (21, 13)):
        resized = image.resize(width, height)
        assert (resized.width, resized.height) == (width, height)
        assert (resized.pixels == value).all()
