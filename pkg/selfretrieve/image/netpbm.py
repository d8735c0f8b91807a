from __future__ import annotations

import logging
import os
from pathlib import Path

from selfretrieve.exceptions import DecodeError
from selfretrieve.image.image import Image

log = logging.getLogger(__name__)
log.setLevel(os.getenv("SELFRETRIEVE_LOG_NETPBM", "NOTSET"))

MAGIC_CHANNELS = {b"P5": 1, b"P6": 3}
CHANNELS_MAGIC = {1: b"P5", 3: b"P6"}
WHITESPACE = b" \t\n\r\v\f"
MAXVAL = 255


def _read_token(buf: bytes, offset: int) -> tuple[bytes, int]:
    """Read the next header token starting at ``offset``, skipping whitespace and ``#`` comments."""
    while offset < len(buf):
        if buf[offset] in WHITESPACE:
            offset += 1
        elif buf[offset] == ord("#"):
            while offset < len(buf) and buf[offset] not in b"\r\n":
                offset += 1
        else:
            break

    start = offset
    while offset < len(buf) and buf[offset] not in WHITESPACE and buf[offset] != ord("#"):
        offset += 1

    if start == offset:
        raise DecodeError("Unexpected end of header", offset)
    return buf[start:offset], offset


def _read_number(buf: bytes, offset: int, field: str) -> tuple[int, int]:
    token, end = _read_token(buf, offset)
    if not token.isdigit():
        raise DecodeError(f"Invalid {field}: {token!r}", end - len(token))
    return int(token), end


def decode_image(buf: bytes) -> Image:
    """Decode a binary PGM (``P5``) or PPM (``P6``) file with a maxval of 255.

    Raises:
        DecodeError: If the header is malformed, the maxval is unsupported or the payload is truncated.
    """
    magic = bytes(buf[:2])
    if magic not in MAGIC_CHANNELS:
        raise DecodeError(f"Invalid netpbm magic: {magic!r}", 0)
    channels = MAGIC_CHANNELS[magic]

    offset = 2
    width, offset = _read_number(buf, offset, "width")
    height, offset = _read_number(buf, offset, "height")
    maxval_offset = offset
    maxval, offset = _read_number(buf, offset, "maxval")

    if width < 1 or height < 1:
        raise DecodeError(f"Invalid image dimensions: {width}x{height}", 2)
    if maxval != MAXVAL:
        raise DecodeError(f"unsupported maxval {maxval}", maxval_offset)

    # A single whitespace byte separates the header from the payload
    if offset >= len(buf) or buf[offset] not in WHITESPACE:
        raise DecodeError("Missing whitespace after header", offset)
    offset += 1

    size = width * height * channels
    available = len(buf) - offset
    if available < size:
        raise DecodeError(f"Truncated payload: expected {size} bytes, got {available}", offset + available)
    if available > size:
        log.debug("Ignoring %d trailing bytes after netpbm payload", available - size)

    return Image.from_samples(width, height, channels, buf[offset : offset + size])


def encode_image(image: Image) -> bytes:
    header = b"%s\n%d %d\n%d\n" % (CHANNELS_MAGIC[image.channels], image.width, image.height, MAXVAL)
    return header + image.samples()


def read_image(path: Path | str) -> Image:
    return decode_image(Path(path).read_bytes())


def write_image(path: Path | str, image: Image) -> None:
    Path(path).write_bytes(encode_image(image))
