"""Everything upstream of the decoder.

Segment enumeration and clip sampling, RGB-difference planes, embedding
providers (file-backed tables and a deterministic toy encoder standing in for a
pretrained 2D CNN), modality stacking, and the ``VTNF`` raw-frame container.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .errors import (BadMagicError, BoundsError, ConfigError, IntegrityError, ShapeError,
                     TruncatedFileError, UnsupportedVersionError)

DEFAULT_STRIDE = 2
DEFAULT_CLIP_LEN = 16
DEFAULT_WINDOW = DEFAULT_STRIDE * DEFAULT_CLIP_LEN
MODALITIES = ("rgb", "rgbdiff", "stacked")


@dataclass
class FrameSequence:
    """Decoded frames as uint8 planes, shape ``(num_frames, channels, height, width)``."""

    pixels: np.ndarray
    mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    std: tuple[float, ...] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 4:
            raise ShapeError(f"frames must be (F, C, H, W), got shape {self.pixels.shape}")
        if self.num_frames < 1:
            raise ShapeError("a frame sequence needs at least one frame")
        if len(self.mean) != self.channels or len(self.std) != self.channels:
            raise ConfigError("normalization mean/std need one value per channel")

    @property
    def num_frames(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[1]

    def normalized(self, indices) -> np.ndarray:
        """(pixel/255 - mean) / std per channel, for the given frames."""
        px = self.pixels[np.asarray(indices)].astype(np.float64) / 255.0
        mean = np.asarray(self.mean).reshape(1, -1, 1, 1)
        std = np.asarray(self.std).reshape(1, -1, 1, 1)
        return (px - mean) / std


@dataclass(frozen=True)
class ClipSpec:
    segment_start: int = 0
    stride: int = DEFAULT_STRIDE
    clip_len: int = DEFAULT_CLIP_LEN

    @property
    def receptive_field(self) -> int:
        return self.stride * self.clip_len


@dataclass
class EmbeddingClip:
    embeddings: np.ndarray
    label: int | None = None
    modality: str = "rgb"

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")


def enumerate_segments(num_frames: int, window: int = DEFAULT_WINDOW,
                       stride: int = DEFAULT_STRIDE) -> list[ClipSpec]:
    """All non-overlapping full windows; a trailing partial window is dropped."""
    if window % stride:
        raise ConfigError(f"window {window} is not a multiple of stride {stride}")
    return [ClipSpec(start, stride, window // stride)
            for start in range(0, num_frames - window + 1, window)]


def sample_clip(num_frames: int | FrameSequence, spec: ClipSpec) -> list[int]:
    n = num_frames.num_frames if isinstance(num_frames, FrameSequence) else num_frames
    if spec.segment_start < 0 or spec.segment_start + spec.stride * (spec.clip_len - 1) >= n:
        raise BoundsError(f"clip starting at {spec.segment_start} with stride {spec.stride} "
                          f"and length {spec.clip_len} overruns {n} frames")
    return [spec.segment_start + spec.stride * i for i in range(spec.clip_len)]


def rgb_diff(frames: FrameSequence, indices: Sequence[int], stride: int | None = None) -> np.ndarray:
    """Differences of normalized frames, each against the frame ``stride`` earlier.

    When that predecessor would fall before frame 0 the difference is zero.
    ``stride`` defaults to the spacing of ``indices``.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise BoundsError("rgb_diff needs a non-empty index list")
    if idx.min() < 0 or idx.max() >= frames.num_frames:
        raise BoundsError(f"indices out of range for {frames.num_frames} frames")
    if stride is None:
        stride = int(idx[1] - idx[0]) if idx.size > 1 else 1
    cur = frames.normalized(idx)
    prev_idx = idx - stride
    has_prev = prev_idx >= 0
    out = np.zeros_like(cur)
    if has_prev.any():
        out[has_prev] = cur[has_prev] - frames.normalized(prev_idx[has_prev])
    return out


class EmbeddingProvider(Protocol):
    dim: int

    def embed(self, indices: Sequence[int], planes: np.ndarray | None = None) -> np.ndarray:
        """Return one ``dim``-vector per requested frame."""


class TableProvider:
    """Serves precomputed per-frame embeddings; frame index == row index."""

    def __init__(self, table: np.ndarray):
        self.table = np.asarray(table)
        if self.table.ndim != 2:
            raise ShapeError(f"embedding table must be 2-D, got {self.table.shape}")
        self.dim = self.table.shape[1]

    def embed(self, indices, planes=None):
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.table.shape[0]):
            raise BoundsError(f"frame index out of range for a {self.table.shape[0]}-row table")
        return self.table[idx]


def _area_downsample(plane: np.ndarray, size: int) -> np.ndarray:
    rows = np.array_split(np.arange(plane.shape[0]), size)
    cols = np.array_split(np.arange(plane.shape[1]), size)
    out = np.empty((size, size))
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            out[i, j] = plane[np.ix_(r, c)].mean() if r.size and c.size else 0.0
    return out


@dataclass
class ToyEncoder:
    """tanh(A · flatten(8x8 grayscale(frame)) + b) with a seeded affine map."""

    dim: int
    seed: int = 0
    grid: int = 8
    weight: np.ndarray = field(init=False, repr=False)
    bias: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        n = self.grid * self.grid
        self.weight = rng.normal(0.0, 1.0 / np.sqrt(n), size=(n, self.dim))
        self.bias = rng.normal(0.0, 0.1, size=self.dim)

    def encode(self, planes: np.ndarray) -> np.ndarray:
        """Encode real-valued planes of shape ``(n, C, H, W)`` to ``(n, dim)``."""
        planes = np.asarray(planes, dtype=np.float64)
        if planes.ndim != 4:
            raise ShapeError(f"expected (n, C, H, W) planes, got {planes.shape}")
        if planes.shape[2] < self.grid or planes.shape[3] < self.grid:
            raise ShapeError(f"frames must be at least {self.grid}x{self.grid}")
        gray = planes.mean(axis=1)
        feats = np.stack([_area_downsample(g, self.grid).ravel() for g in gray])
        return np.tanh(feats @ self.weight + self.bias)

    def embed(self, indices, planes=None):
        if planes is None:
            raise ConfigError("the toy encoder needs pixel planes")
        return self.encode(planes)


def embed_clip(provider: EmbeddingProvider, spec: ClipSpec, frames: FrameSequence | None = None,
               modality: str = "rgb", label: int | None = None,
               expected_dim: int | None = None) -> EmbeddingClip:
    """Embed one sampled clip with ``provider``.

    With ``frames`` given, the provider receives normalized frames (``rgb``) or
    difference planes (``rgbdiff``); table providers only use the indices.
    """
    if expected_dim is not None and provider.dim != expected_dim:
        raise ConfigError(f"provider produces {provider.dim}-d embeddings, expected {expected_dim}")
    if modality not in ("rgb", "rgbdiff"):
        raise ConfigError(f"embed_clip handles rgb or rgbdiff, got {modality!r}")
    planes = None
    if frames is not None:
        idx = sample_clip(frames, spec)
        planes = frames.normalized(idx) if modality == "rgb" else rgb_diff(frames, idx, spec.stride)
    else:
        idx = [spec.segment_start + spec.stride * i for i in range(spec.clip_len)]
    emb = np.asarray(provider.embed(idx, planes))
    if emb.shape != (spec.clip_len, provider.dim):
        raise ShapeError(f"provider returned {emb.shape}, expected {(spec.clip_len, provider.dim)}")
    return EmbeddingClip(emb, label, modality)


def stack_modalities(rgb: EmbeddingClip, diff: EmbeddingClip) -> EmbeddingClip:
    a, b = np.asarray(rgb.embeddings), np.asarray(diff.embeddings)
    if a.shape != b.shape:
        raise ShapeError(f"cannot stack clips of shapes {a.shape} and {b.shape}")
    label = rgb.label if rgb.label is not None else diff.label
    return EmbeddingClip(np.concatenate([a, b], axis=1), label, "stacked")


def video_clips(embeddings: np.ndarray, clip_len: int = DEFAULT_CLIP_LEN,
                stride: int = DEFAULT_STRIDE) -> list[np.ndarray]:
    """Per-frame embeddings of one video -> one ``(clip_len, d)`` array per segment."""
    provider = TableProvider(embeddings)
    return [provider.embed(sample_clip(len(embeddings), spec))
            for spec in enumerate_segments(len(embeddings), stride * clip_len, stride)]


# ---------------------------------------------------------------- VTNF container

FRAMES_MAGIC = b"VTNF"
FRAMES_VERSION = 1
_FRAMES_HEADER = struct.Struct("<4sHIIII")  # magic, version, frames, channels, height, width


def frames_to_bytes(frames: FrameSequence) -> bytes:
    f, c, h, w = frames.pixels.shape
    return _FRAMES_HEADER.pack(FRAMES_MAGIC, FRAMES_VERSION, f, c, h, w) + frames.pixels.tobytes()


def frames_from_bytes(buf: bytes) -> FrameSequence:
    if len(buf) < 4:
        raise TruncatedFileError("frame container shorter than its magic")
    if buf[:4] != FRAMES_MAGIC:
        raise BadMagicError(f"bad frame-container magic {buf[:4]!r}")
    if len(buf) < _FRAMES_HEADER.size:
        raise TruncatedFileError("frame container ends inside its header")
    _, version, f, c, h, w = _FRAMES_HEADER.unpack_from(buf, 0)
    if version != FRAMES_VERSION:
        raise UnsupportedVersionError(f"frame container version {version}")
    need = _FRAMES_HEADER.size + f * c * h * w
    if len(buf) < need:
        raise TruncatedFileError(f"frame container is {len(buf)} bytes, header declares {need}")
    if len(buf) > need:
        raise IntegrityError("trailing bytes after frame data")
    px = np.frombuffer(buf, dtype=np.uint8, offset=_FRAMES_HEADER.size).reshape(f, c, h, w)
    return FrameSequence(px.copy())


def save_frames(frames: FrameSequence, path):
    with open(path, "wb") as fh:
        fh.write(frames_to_bytes(frames))


def load_frames(path) -> FrameSequence:
    with open(path, "rb") as fh:
        return frames_from_bytes(fh.read())
