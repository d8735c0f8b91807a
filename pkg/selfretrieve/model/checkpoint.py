from __future__ import annotations

import io
import logging
import math
import os
import zlib
from pathlib import Path
from typing import TYPE_CHECKING, BinaryIO

import numpy as np
from dissect.util.stream import RangeStream

from selfretrieve.exceptions import ChecksumError, DatasetError, DecodeError, InvalidSignature, VersionError
from selfretrieve.model.c_checkpoint import FLOAT_DTYPE, c_checkpoint
from selfretrieve.model.encoder import EncoderParams

if TYPE_CHECKING:
    from collections.abc import Iterable

log = logging.getLogger(__name__)
log.setLevel(os.getenv("SELFRETRIEVE_LOG_CHECKPOINT", "NOTSET"))


def _read_floats(fh: BinaryIO, count: int, offset: int) -> np.ndarray:
    buf = fh.read(count * 4)
    if len(buf) != count * 4:
        raise DecodeError(f"Truncated tensor payload: expected {count * 4} bytes, got {len(buf)}", offset)
    return np.frombuffer(buf, dtype=FLOAT_DTYPE).astype(np.float32)


def dump_checkpoint(params: EncoderParams) -> bytes:
    """Serialize parameters as float32 tensor records followed by a CRC32 of everything before it."""
    stream = io.BytesIO()
    c_checkpoint.checkpoint_header(magic=c_checkpoint.CHECKPOINT_MAGIC, version=EncoderParams.VERSION).write(stream)

    for name, value in params.state().items():
        encoded = name.encode()
        c_checkpoint.tensor_record(
            name_length=len(encoded),
            name=encoded,
            rank=value.ndim,
            dims=list(value.shape),
        ).write(stream)
        stream.write(np.ascontiguousarray(value, dtype=FLOAT_DTYPE).tobytes())

    c_checkpoint.uint32.write(stream, zlib.crc32(stream.getvalue()))
    return stream.getvalue()


def read_checkpoint(fh: BinaryIO) -> EncoderParams:
    """Parse a checkpoint, verifying the signature, format version and checksum in that order.

    Raises:
        InvalidSignature: If the file does not start with the checkpoint magic.
        VersionError: If the file was written by another format version.
        ChecksumError: If the trailing CRC32 does not match the content.
    """
    fh.seek(0, io.SEEK_END)
    size = fh.tell()
    fh.seek(0)

    header_size = len(c_checkpoint.checkpoint_header)
    if size < header_size + 4:
        raise InvalidSignature(f"File too small for a checkpoint: {size} bytes")

    header = c_checkpoint.checkpoint_header(fh)
    if header.magic != c_checkpoint.CHECKPOINT_MAGIC:
        raise InvalidSignature(f"Invalid checkpoint signature: {header.magic!r}")
    if header.version != EncoderParams.VERSION:
        raise VersionError(f"Unsupported checkpoint version {header.version}, expected {EncoderParams.VERSION}")

    fh.seek(0)
    crc = zlib.crc32(fh.read(size - 4))
    stored = c_checkpoint.uint32(fh)
    if crc != stored:
        raise ChecksumError(f"Checkpoint checksum mismatch: stored 0x{stored:08x}, computed 0x{crc:08x}")

    records = RangeStream(fh, header_size, size - 4 - header_size)
    tensors = {}
    while records.tell() < records.size:
        offset = header_size + records.tell()
        record = c_checkpoint.tensor_record(records)
        dims = tuple(int(d) for d in record.dims)
        name = record.name.decode()
        tensors[name] = _read_floats(records, math.prod(dims), offset).reshape(dims)

    log.debug("Loaded %d tensors from checkpoint", len(tensors))
    return EncoderParams(tensors)


def save_checkpoint(params: EncoderParams, path: Path | str) -> None:
    Path(path).write_bytes(dump_checkpoint(params))


def load_checkpoint(path: Path | str) -> EncoderParams:
    with Path(path).open("rb") as fh:
        return read_checkpoint(fh)


class EmbeddingTable:
    """Unit descriptors keyed by image id, in insertion order.

    Args:
        ids: Unique image identifiers.
        vectors: A ``(len(ids), dim)`` array of descriptors.
    """

    def __init__(self, ids: Iterable[str], vectors: np.ndarray):
        self.ids = list(ids)
        self.vectors = np.asarray(vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ValueError(f"Expected {len(self.ids)} vectors, got array of shape {self.vectors.shape}")

        self.index = {}
        for i, image_id in enumerate(self.ids):
            if image_id in self.index:
                raise DatasetError(f"Duplicate id in embedding table: {image_id}")
            self.index[image_id] = i

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.index

    def __getitem__(self, image_id: str) -> np.ndarray:
        return self.vectors[self.index[image_id]]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def subset(self, ids: Iterable[str]) -> EmbeddingTable:
        ids = list(ids)
        return EmbeddingTable(ids, self.vectors[[self.index[i] for i in ids]])

    def dumps(self) -> bytes:
        stream = io.BytesIO()
        c_checkpoint.embedding_header(magic=c_checkpoint.EMBEDDING_MAGIC, count=len(self), dim=self.dim).write(stream)
        for image_id, vector in zip(self.ids, self.vectors):
            encoded = image_id.encode()
            c_checkpoint.embedding_row(id_length=len(encoded), id=encoded).write(stream)
            stream.write(vector.astype(FLOAT_DTYPE).tobytes())
        return stream.getvalue()

    @classmethod
    def read(cls, fh: BinaryIO) -> EmbeddingTable:
        header = c_checkpoint.embedding_header(fh)
        if header.magic != c_checkpoint.EMBEDDING_MAGIC:
            raise InvalidSignature(f"Invalid embedding table signature: {header.magic!r}")

        ids = []
        vectors = np.empty((header.count, header.dim), dtype=np.float32)
        for i in range(header.count):
            offset = fh.tell()
            try:
                row = c_checkpoint.embedding_row(fh)
            except EOFError:
                raise DecodeError(f"Truncated embedding table at row {i}", offset)
            ids.append(row.id.decode())
            vectors[i] = _read_floats(fh, header.dim, offset)
        return cls(ids, vectors)

    def save(self, path: Path | str) -> None:
        Path(path).write_bytes(self.dumps())

    @classmethod
    def load(cls, path: Path | str) -> EmbeddingTable:
        with Path(path).open("rb") as fh:
            return cls.read(fh)
