"""Fully-attentional VTN decoder over per-frame embeddings.

The decoder is a stack of blocks. Each block runs multi-head self-attention
(per-head affine Q/K/V maps, scaled dot-product attention, heads concatenated)
followed by a position-wise two-layer feedforward with a residual connection.
A per-frame linear classifier produces frame logits that are averaged over the
sequence into clip logits.

All forward functions accept either a single clip ``(t, d)`` or a batch
``(B, t, d)``; weight gradients are summed over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .tensor import stable_softmax


@dataclass(frozen=True)
class DecoderConfig:
    d_model: int = 512
    num_heads: int = 8
    d_k: int | None = None
    d_v: int | None = None
    d_ff: int | None = None
    num_blocks: int = 4
    seq_len: int = 16
    num_classes: int = 400
    # Width of incoming embeddings; differs from d_model only for stacked
    # inputs, which then go through a learned input projection.
    input_dim: int | None = None
    attn_residual: bool = True
    post_concat_proj: bool = False

    def __post_init__(self):
        if self.num_heads < 1:
            raise ConfigError(f"num_heads must be >= 1, got {self.num_heads}")
        if self.d_k is None:
            object.__setattr__(self, "d_k", self.d_model // self.num_heads)
        if self.d_v is None:
            object.__setattr__(self, "d_v", self.d_model // self.num_heads)
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 2 * self.d_model)
        if self.input_dim is None:
            object.__setattr__(self, "input_dim", self.d_model)
        for name in ("d_model", "d_k", "d_v", "d_ff", "num_blocks", "seq_len",
                     "num_classes", "input_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.post_concat_proj and self.concat_dim != self.d_model:
            raise ConfigError(
                f"num_heads * d_v = {self.concat_dim} must equal d_model = {self.d_model} "
                "when there is no post-concatenation projection"
            )

    @property
    def concat_dim(self) -> int:
        return self.num_heads * self.d_v

    @property
    def has_input_proj(self) -> bool:
        return self.input_dim != self.d_model

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class HeadWeights:
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray


@dataclass
class BlockWeights:
    heads: list[HeadWeights]
    w_ff1: np.ndarray
    b_ff1: np.ndarray
    w_ff2: np.ndarray
    b_ff2: np.ndarray
    w_o: np.ndarray | None = None
    b_o: np.ndarray | None = None


@dataclass
class DecoderWeights:
    config: DecoderConfig
    blocks: list[BlockWeights]
    w_cls: np.ndarray
    b_cls: np.ndarray
    w_in: np.ndarray | None = None
    b_in: np.ndarray | None = None

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """Yield ``(name, array)`` in canonical serialization order."""
        if self.w_in is not None:
            yield "w_in", self.w_in
            yield "b_in", self.b_in
        for i, blk in enumerate(self.blocks):
            for j, h in enumerate(blk.heads):
                p = f"blocks.{i}.heads.{j}."
                yield p + "w_q", h.w_q
                yield p + "b_q", h.b_q
                yield p + "w_k", h.w_k
                yield p + "b_k", h.b_k
                yield p + "w_v", h.w_v
                yield p + "b_v", h.b_v
            p = f"blocks.{i}."
            if blk.w_o is not None:
                yield p + "w_o", blk.w_o
                yield p + "b_o", blk.b_o
            yield p + "w_ff1", blk.w_ff1
            yield p + "b_ff1", blk.b_ff1
            yield p + "w_ff2", blk.w_ff2
            yield p + "b_ff2", blk.b_ff2
        yield "w_cls", self.w_cls
        yield "b_cls", self.b_cls

    def tensors(self) -> list[np.ndarray]:
        return [a for _, a in self.named_tensors()]

    def num_elements(self) -> int:
        return sum(a.size for a in self.tensors())

    @classmethod
    def from_tensors(cls, config: DecoderConfig, arrays) -> "DecoderWeights":
        arrays = list(arrays)
        shapes = param_shapes(config)
        if len(arrays) != len(shapes):
            raise ShapeError(f"expected {len(shapes)} tensors, got {len(arrays)}")
        for (name, shape), a in zip(shapes, arrays):
            if tuple(a.shape) != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {tuple(a.shape)}")
        it = iter(arrays)
        w_in = b_in = None
        if config.has_input_proj:
            w_in, b_in = next(it), next(it)
        blocks = []
        for _ in range(config.num_blocks):
            heads = [HeadWeights(*(next(it) for _ in range(6))) for _ in range(config.num_heads)]
            w_o = b_o = None
            if config.post_concat_proj:
                w_o, b_o = next(it), next(it)
            w_ff1, b_ff1, w_ff2, b_ff2 = (next(it) for _ in range(4))
            blocks.append(BlockWeights(heads, w_ff1, b_ff1, w_ff2, b_ff2, w_o, b_o))
        w_cls, b_cls = next(it), next(it)
        return cls(config, blocks, w_cls, b_cls, w_in, b_in)

    @classmethod
    def from_flat(cls, config: DecoderConfig, flat: np.ndarray, dtype=np.float64):
        flat = np.asarray(flat)
        expected = sum(math.prod(s) for _, s in param_shapes(config))
        if flat.size != expected:
            raise ShapeError(f"flat vector has {flat.size} elements, config needs {expected}")
        arrays, pos = [], 0
        for _, shape in param_shapes(config):
            n = math.prod(shape)
            arrays.append(flat[pos:pos + n].astype(dtype).reshape(shape))
            pos += n
        return cls.from_tensors(config, arrays)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.tensors()])

    def map(self, fn: Callable[..., np.ndarray], *others: "DecoderWeights") -> "DecoderWeights":
        """Apply ``fn`` tensor-wise across this and ``others`` (same config)."""
        cols = zip(self.tensors(), *(o.tensors() for o in others))
        return DecoderWeights.from_tensors(self.config, [fn(*c) for c in cols])

    def astype(self, dtype) -> "DecoderWeights":
        return self.map(lambda a: a.astype(dtype))

    def zeros_like(self) -> "DecoderWeights":
        return self.map(np.zeros_like)

    def copy(self) -> "DecoderWeights":
        return self.map(np.copy)


# Gradients mirror the weights exactly.
DecoderGradients = DecoderWeights


def param_shapes(cfg: DecoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of every parameter, in canonical order."""
    out = []
    d, dk, dv = cfg.d_model, cfg.d_k, cfg.d_v
    if cfg.has_input_proj:
        out += [("w_in", (cfg.input_dim, d)), ("b_in", (d,))]
    for i in range(cfg.num_blocks):
        for j in range(cfg.num_heads):
            p = f"blocks.{i}.heads.{j}."
            out += [(p + "w_q", (d, dk)), (p + "b_q", (dk,)),
                    (p + "w_k", (d, dk)), (p + "b_k", (dk,)),
                    (p + "w_v", (d, dv)), (p + "b_v", (dv,))]
        p = f"blocks.{i}."
        if cfg.post_concat_proj:
            out += [(p + "w_o", (cfg.concat_dim, d)), (p + "b_o", (d,))]
        out += [(p + "w_ff1", (d, cfg.d_ff)), (p + "b_ff1", (cfg.d_ff,)),
                (p + "w_ff2", (cfg.d_ff, d)), (p + "b_ff2", (d,))]
    out += [("w_cls", (d, cfg.num_classes)), ("b_cls", (cfg.num_classes,))]
    return out


def init_weights(cfg: DecoderConfig, seed: int = 0, dtype=np.float64) -> DecoderWeights:
    """Glorot-uniform matrices, zero biases, drawn in canonical order."""
    rng = np.random.default_rng(seed)
    arrays = []
    for _, shape in param_shapes(cfg):
        if len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            arrays.append(rng.uniform(-limit, limit, size=shape).astype(dtype))
        else:
            arrays.append(np.zeros(shape, dtype=dtype))
    return DecoderWeights.from_tensors(cfg, arrays)


def zero_weights(cfg: DecoderConfig, dtype=np.float64) -> DecoderWeights:
    return DecoderWeights.from_tensors(
        cfg, [np.zeros(s, dtype=dtype) for _, s in param_shapes(cfg)])


# ---------------------------------------------------------------- forward

def _check_width(x: np.ndarray, width: int, what: str):
    if x.ndim not in (2, 3):
        raise ShapeError(f"{what}: expected (t, d) or (B, t, d) input, got shape {x.shape}")
    if x.shape[-1] != width:
        raise ShapeError(f"{what}: input width {x.shape[-1]} != expected {width}")
    if x.shape[-2] < 1:
        raise ShapeError(f"{what}: sequence length must be >= 1")


def _T(a: np.ndarray) -> np.ndarray:
    return a.swapaxes(-1, -2)


def _head_forward(x, w: HeadWeights):
    q = x @ w.w_q + w.b_q
    k = x @ w.w_k + w.b_k
    v = x @ w.w_v + w.b_v
    inv = 1.0 / math.sqrt(w.w_q.shape[1])
    attn = stable_softmax((q @ _T(k)) * inv, axis=-1)
    return attn @ v, (q, k, v, attn)


def attention_head(x, w: HeadWeights, return_attention: bool = False):
    """softmax(Q K^T / sqrt(d_k)) V for one head; optionally also the attention matrix."""
    x = np.asarray(x)
    _check_width(x, w.w_q.shape[0], "attention_head")
    out, (_, _, _, attn) = _head_forward(x, w)
    return (out, attn) if return_attention else out


def multi_head_self_attention(x, heads: list[HeadWeights]):
    if not heads:
        raise ShapeError("multi_head_self_attention: need at least one head")
    x = np.asarray(x)
    return np.concatenate([attention_head(x, h) for h in heads], axis=-1)


def pointwise_feedforward(x, w: BlockWeights):
    """x + relu(x W1 + b1) W2 + b2, independently at every position."""
    x = np.asarray(x)
    _check_width(x, w.w_ff1.shape[0], "pointwise_feedforward")
    return x + np.maximum(x @ w.w_ff1 + w.b_ff1, 0) @ w.w_ff2 + w.b_ff2


def _block_forward(x, w: BlockWeights, attn_residual: bool):
    outs, head_caches = [], []
    for h in w.heads:
        o, c = _head_forward(x, h)
        outs.append(o)
        head_caches.append(c)
    concat = np.concatenate(outs, axis=-1)
    mixed = concat @ w.w_o + w.b_o if w.w_o is not None else concat
    a = x + mixed if attn_residual else mixed
    pre = a @ w.w_ff1 + w.b_ff1
    hidden = np.maximum(pre, 0)
    y = a + hidden @ w.w_ff2 + w.b_ff2
    cache = dict(x=x, heads=head_caches, concat=concat, a=a, pre=pre, hidden=hidden)
    return y, cache


def decoder_block(x, w: BlockWeights, attn_residual: bool = True):
    x = np.asarray(x)
    _check_width(x, w.w_ff1.shape[0], "decoder_block")
    return _block_forward(x, w, attn_residual)[0]


def _project_input(x, w: DecoderWeights):
    _check_width(x, w.config.input_dim, "decoder")
    if w.w_in is None:
        return x
    return x @ w.w_in + w.b_in


def decoder_forward(x, w: DecoderWeights):
    """Input projection (if any) then all decoder blocks; returns (t, d_model)."""
    h = _project_input(np.asarray(x), w)
    for blk in w.blocks:
        h = _block_forward(h, blk, w.config.attn_residual)[0]
    return h


def classify_clip(x, w: DecoderWeights):
    """Return ``(frame_logits, clip_probs)``; clip logits are the frame-mean."""
    h = decoder_forward(x, w)
    frame_logits = h @ w.w_cls + w.b_cls
    clip_logits = frame_logits.mean(axis=-2)
    return frame_logits, stable_softmax(clip_logits, axis=-1)


@dataclass
class ForwardCache:
    weights: DecoderWeights
    x: np.ndarray
    projected: np.ndarray
    blocks: list[dict] = field(default_factory=list)
    final: np.ndarray | None = None


def forward_with_cache(x, w: DecoderWeights):
    """Forward pass keeping the intermediates needed by :func:`decoder_backward`.

    Returns ``(clip_logits, cache)``.
    """
    x = np.asarray(x)
    h = _project_input(x, w)
    cache = ForwardCache(weights=w, x=x, projected=h)
    for blk in w.blocks:
        h, c = _block_forward(h, blk, w.config.attn_residual)
        cache.blocks.append(c)
    cache.final = h
    clip_logits = (h @ w.w_cls + w.b_cls).mean(axis=-2)
    return clip_logits, cache


# ---------------------------------------------------------------- backward

def _wgrad(inp, dout):
    # sum over batch and positions of inp^T dout
    return inp.reshape(-1, inp.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])


def _bgrad(dout):
    return dout.reshape(-1, dout.shape[-1]).sum(axis=0)


def _head_backward(x, w: HeadWeights, c, d_out):
    q, k, v, attn = c
    inv = 1.0 / math.sqrt(w.w_q.shape[1])
    d_attn = d_out @ _T(v)
    d_v = _T(attn) @ d_out
    d_scores = attn * (d_attn - np.sum(d_attn * attn, axis=-1, keepdims=True))
    d_q = (d_scores @ k) * inv
    d_k = (_T(d_scores) @ q) * inv
    grads = HeadWeights(_wgrad(x, d_q), _bgrad(d_q), _wgrad(x, d_k), _bgrad(d_k),
                        _wgrad(x, d_v), _bgrad(d_v))
    dx = d_q @ w.w_q.T + d_k @ w.w_k.T + d_v @ w.w_v.T
    return grads, dx


def _block_backward(w: BlockWeights, c: dict, dy, attn_residual: bool):
    g_ff2 = _wgrad(c["hidden"], dy)
    g_bff2 = _bgrad(dy)
    d_pre = (dy @ w.w_ff2.T) * (c["pre"] > 0)
    g_ff1 = _wgrad(c["a"], d_pre)
    g_bff1 = _bgrad(d_pre)
    d_a = dy + d_pre @ w.w_ff1.T

    g_o = g_bo = None
    if w.w_o is not None:
        g_o = _wgrad(c["concat"], d_a)
        g_bo = _bgrad(d_a)
        d_concat = d_a @ w.w_o.T
    else:
        d_concat = d_a

    x = c["x"]
    dx = d_a.copy() if attn_residual else np.zeros_like(x)
    head_grads = []
    col = 0
    for h, hc in zip(w.heads, c["heads"]):
        dv = h.w_v.shape[1]
        hg, hdx = _head_backward(x, h, hc, d_concat[..., col:col + dv])
        head_grads.append(hg)
        dx += hdx
        col += dv
    return BlockWeights(head_grads, g_ff1, g_bff1, g_ff2, g_bff2, g_o, g_bo), dx


def decoder_backward(cache: ForwardCache | None, upstream):
    """Gradients of a scalar loss given ``upstream`` = dLoss/d(clip_logits).

    Returns ``(DecoderGradients, input_gradient)``.
    """
    if cache is None or cache.final is None:
        raise StateError("decoder_backward called without a completed forward pass")
    w = cache.weights
    h = cache.final
    upstream = np.asarray(upstream, dtype=h.dtype)
    if upstream.shape != h.shape[:-2] + (w.config.num_classes,):
        raise ShapeError(f"upstream gradient shape {upstream.shape} does not match "
                         f"clip logits {h.shape[:-2] + (w.config.num_classes,)}")
    t = h.shape[-2]
    d_frame = np.broadcast_to(np.expand_dims(upstream, -2) / t, h.shape[:-1] + upstream.shape[-1:])
    g_cls = _wgrad(h, d_frame)
    g_bcls = _bgrad(d_frame)
    dh = d_frame @ w.w_cls.T

    block_grads = [None] * len(w.blocks)
    for i in reversed(range(len(w.blocks))):
        block_grads[i], dh = _block_backward(w.blocks[i], cache.blocks[i], dh,
                                             w.config.attn_residual)
    g_in = g_bin = None
    if w.w_in is not None:
        g_in = _wgrad(cache.x, dh)
        g_bin = _bgrad(dh)
        dh = dh @ w.w_in.T
    grads = DecoderWeights(w.config, block_grads, g_cls, g_bcls, g_in, g_bin)
    return grads, dh


class VTN:
    """Stateful wrapper: ``forward`` caches intermediates, ``backward`` consumes them."""

    def __init__(self, weights: DecoderWeights):
        self.weights = weights
        self._cache: ForwardCache | None = None

    @property
    def config(self) -> DecoderConfig:
        return self.weights.config

    def forward(self, x):
        clip_logits, self._cache = forward_with_cache(x, self.weights)
        return clip_logits

    def backward(self, upstream):
        if self._cache is None:
            raise StateError("backward() called before forward()")
        cache, self._cache = self._cache, None
        return decoder_backward(cache, upstream)

    def predict(self, x):
        return classify_clip(x, self.weights)[1]
