"""Binary persistence for decoder weights and embedding tables.

Model file (little-endian)::

    "VTNM" | version u16 | flags u16
    | d_model, num_heads, d_k, d_v, d_ff, num_blocks, seq_len, num_classes, input_dim : u32
    | element count u64 | float32 payload | CRC32(payload) u32

flags: bit0 residual around attention, bit1 input projection, bit2 projection
after head concatenation, bit3 ReLU between the feedforward layers (always set).
Payload order is ``DecoderWeights.named_tensors()``.

Embedding file (little-endian)::

    "VTNE" | version u16 | d u32 | rows u64 | float32 rows*d
    | optional label block: "VTNL" | n u64 | n * (frame_count u64, label i64)
    | CRC32(everything after the header) u32

The label block partitions the rows into consecutive videos; label -1 means
unlabeled.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass

import numpy as np

from .cost import count_params
from .decoder import DecoderConfig, DecoderWeights
from .errors import (BadMagicError, ConfigError, ChecksumError, IntegrityError,
                     TruncatedFileError, UnsupportedVersionError)

MODEL_MAGIC = b"VTNM"
EMBED_MAGIC = b"VTNE"
LABEL_MAGIC = b"VTNL"
MODEL_VERSION = 1
EMBED_VERSION = 1

FLAG_ATTN_RESIDUAL = 1 << 0
FLAG_INPUT_PROJ = 1 << 1
FLAG_POST_CONCAT = 1 << 2
FLAG_RELU = 1 << 3
_KNOWN_FLAGS = FLAG_ATTN_RESIDUAL | FLAG_INPUT_PROJ | FLAG_POST_CONCAT | FLAG_RELU

_MODEL_HEADER = struct.Struct("<4sHH9IQ")
_EMBED_HEADER = struct.Struct("<4sHIQ")
_CFG_FIELDS = ("d_model", "num_heads", "d_k", "d_v", "d_ff", "num_blocks",
               "seq_len", "num_classes", "input_dim")


def _atomic_write(path, data: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _flags(cfg: DecoderConfig) -> int:
    flags = FLAG_RELU
    if cfg.attn_residual:
        flags |= FLAG_ATTN_RESIDUAL
    if cfg.has_input_proj:
        flags |= FLAG_INPUT_PROJ
    if cfg.post_concat_proj:
        flags |= FLAG_POST_CONCAT
    return flags


def model_to_bytes(w: DecoderWeights) -> bytes:
    """Serialize; float64 weights are rounded to float32."""
    cfg = w.config
    payload = w.flat().astype("<f4").tobytes()
    header = _MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, _flags(cfg),
                                *(getattr(cfg, f) for f in _CFG_FIELDS),
                                len(payload) // 4)
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def model_from_bytes(buf: bytes, dtype=np.float32) -> tuple[DecoderWeights, DecoderConfig]:
    if len(buf) < 4:
        raise TruncatedFileError(f"model file is {len(buf)} bytes, shorter than its magic")
    if buf[:4] != MODEL_MAGIC:
        raise BadMagicError(f"bad model magic {buf[:4]!r}, expected {MODEL_MAGIC!r}")
    if len(buf) < 6:
        raise TruncatedFileError("model file ends inside the version field")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != MODEL_VERSION:
        raise UnsupportedVersionError(f"model format version {version} (supported: {MODEL_VERSION})")
    if len(buf) < _MODEL_HEADER.size:
        raise TruncatedFileError(f"model header needs {_MODEL_HEADER.size} bytes, file has {len(buf)}")
    _, _, flags, *dims, count = _MODEL_HEADER.unpack_from(buf, 0)

    if flags & ~_KNOWN_FLAGS or not flags & FLAG_RELU:
        raise IntegrityError(f"unsupported model flags 0x{flags:04x}")
    try:
        cfg = DecoderConfig(**dict(zip(_CFG_FIELDS, dims)),
                            attn_residual=bool(flags & FLAG_ATTN_RESIDUAL),
                            post_concat_proj=bool(flags & FLAG_POST_CONCAT))
    except ConfigError as e:
        raise IntegrityError(f"model header holds an invalid config: {e}") from e
    if cfg.has_input_proj != bool(flags & FLAG_INPUT_PROJ):
        raise IntegrityError("input-projection flag disagrees with input_dim/d_model")
    expected = count_params(cfg).total
    if count != expected:
        raise IntegrityError(f"header declares {count} weights but its config needs {expected}")

    end = _MODEL_HEADER.size + 4 * count
    if len(buf) < end + 4:
        raise TruncatedFileError(f"model file is {len(buf)} bytes, header declares {end + 4}")
    if len(buf) > end + 4:
        raise IntegrityError(f"{len(buf) - end - 4} unexpected trailing bytes after checksum")
    payload = buf[_MODEL_HEADER.size:end]
    (crc,) = struct.unpack_from("<I", buf, end)
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"payload CRC32 0x{zlib.crc32(payload):08x} != stored 0x{crc:08x}")
    flat = np.frombuffer(payload, dtype="<f4")
    return DecoderWeights.from_flat(cfg, flat, dtype=dtype), cfg


def save_model(w: DecoderWeights, path, cfg: DecoderConfig | None = None):
    if cfg is not None and cfg != w.config:
        raise ConfigError("config passed to save_model differs from the weights' config")
    _atomic_write(path, model_to_bytes(w))


def load_model(path, dtype=np.float32) -> tuple[DecoderWeights, DecoderConfig]:
    with open(path, "rb") as f:
        return model_from_bytes(f.read(), dtype=dtype)


# ---------------------------------------------------------------- embeddings

@dataclass
class EmbeddingTable:
    """Rows of frame embeddings, optionally partitioned into labeled videos."""

    embeddings: np.ndarray
    videos: list[tuple[int, int]] | None = None  # (frame_count, label)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self):
        return self.embeddings.shape[0]

    def split_videos(self) -> list[tuple[np.ndarray, int]]:
        if self.videos is None:
            return [(self.embeddings, -1)]
        out, pos = [], 0
        for count, label in self.videos:
            out.append((self.embeddings[pos:pos + count], label))
            pos += count
        return out

    @classmethod
    def from_videos(cls, videos) -> "EmbeddingTable":
        videos = list(videos)
        if not videos:
            raise ConfigError("need at least one video")
        arrays = [np.asarray(e) for e, _ in videos]
        return cls(np.concatenate(arrays, axis=0),
                   [(a.shape[0], int(lbl)) for a, (_, lbl) in zip(arrays, videos)])


def embeddings_to_bytes(table: EmbeddingTable) -> bytes:
    emb = np.asarray(table.embeddings)
    if emb.ndim != 2 or emb.shape[1] < 1:
        raise ConfigError(f"embedding table must be (rows, d) with d >= 1, got {emb.shape}")
    header = _EMBED_HEADER.pack(EMBED_MAGIC, EMBED_VERSION, emb.shape[1], emb.shape[0])
    body = emb.astype("<f4").tobytes()
    if table.videos is not None:
        if sum(c for c, _ in table.videos) != emb.shape[0]:
            raise ConfigError("video frame counts do not sum to the row count")
        body += LABEL_MAGIC + struct.pack("<Q", len(table.videos))
        body += b"".join(struct.pack("<Qq", c, lbl) for c, lbl in table.videos)
    return header + body + struct.pack("<I", zlib.crc32(body))


def embeddings_from_bytes(buf: bytes, expected_dim: int | None = None,
                          dtype=np.float32) -> EmbeddingTable:
    if len(buf) < 4:
        raise TruncatedFileError(f"embedding file is {len(buf)} bytes, shorter than its magic")
    if buf[:4] != EMBED_MAGIC:
        raise BadMagicError(f"bad embedding magic {buf[:4]!r}, expected {EMBED_MAGIC!r}")
    if len(buf) < 6:
        raise TruncatedFileError("embedding file ends inside the version field")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != EMBED_VERSION:
        raise UnsupportedVersionError(f"embedding format version {version} (supported: {EMBED_VERSION})")
    if len(buf) < _EMBED_HEADER.size:
        raise TruncatedFileError("embedding file ends inside its header")
    _, _, d, rows = _EMBED_HEADER.unpack_from(buf, 0)
    if d < 1:
        raise IntegrityError("embedding dimension is zero")
    if expected_dim is not None and d != expected_dim:
        raise ConfigError(f"embedding dimension {d} != expected {expected_dim}")

    pos = _EMBED_HEADER.size
    data_end = pos + 4 * d * rows
    if len(buf) < data_end + 4:
        raise TruncatedFileError(f"embedding file is {len(buf)} bytes, header declares at least {data_end + 4}")
    videos = None
    if len(buf) > data_end + 4:
        lpos = data_end
        if len(buf) < lpos + 12:
            raise TruncatedFileError("embedding file ends inside the label block header")
        if buf[lpos:lpos + 4] != LABEL_MAGIC:
            raise IntegrityError("unexpected bytes after the embedding payload")
        (n,) = struct.unpack_from("<Q", buf, lpos + 4)
        block_end = lpos + 12 + 16 * n
        if len(buf) < block_end + 4:
            raise TruncatedFileError("embedding file ends inside the label block")
        if len(buf) > block_end + 4:
            raise IntegrityError(f"{len(buf) - block_end - 4} unexpected trailing bytes")
        pairs = np.frombuffer(buf, dtype=[("count", "<u8"), ("label", "<i8")],
                              count=n, offset=lpos + 12)
        videos = [(int(c), int(lbl)) for c, lbl in pairs]
        if sum(c for c, _ in videos) != rows:
            raise IntegrityError("label block frame counts do not sum to the row count")
    body = buf[_EMBED_HEADER.size:-4]
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"embedding CRC32 0x{zlib.crc32(body):08x} != stored 0x{crc:08x}")
    emb = np.frombuffer(buf, dtype="<f4", count=rows * d, offset=_EMBED_HEADER.size)
    return EmbeddingTable(emb.reshape(rows, d).astype(dtype), videos)


def save_embeddings(table: EmbeddingTable | np.ndarray, path):
    if not isinstance(table, EmbeddingTable):
        table = EmbeddingTable(np.asarray(table))
    _atomic_write(path, embeddings_to_bytes(table))


def load_embeddings(path, expected_dim: int | None = None, dtype=np.float32) -> EmbeddingTable:
    with open(path, "rb") as f:
        return embeddings_from_bytes(f.read(), expected_dim=expected_dim, dtype=dtype)


def save_dataset(videos, path):
    """Write ``[(frames x d embeddings, label), ...]`` as a labeled embedding file."""
    save_embeddings(EmbeddingTable.from_videos(videos), path)


def load_dataset(path, expected_dim: int | None = None, dtype=np.float64):
    table = load_embeddings(path, expected_dim=expected_dim, dtype=dtype)
    if table.videos is None:
        raise IntegrityError(f"{path}: embedding file has no label block")
    return table.split_videos()
