"""Dense 2-D kernels.

A ``Tensor2D`` is a plain 2-D, row-major (C-contiguous) numpy array with at
least one row and one column. float64 is used for checks and training, float32
for the benchmark path; every op preserves the dtype of its inputs and never
mutates them.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import NumericError, ShapeError

Tensor2D = np.ndarray


def as_tensor2d(a, name: str = "tensor", dtype=None) -> Tensor2D:
    arr = np.ascontiguousarray(a, dtype=dtype)
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D tensor, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name}: rows and cols must be >= 1, got {arr.shape}")
    return arr


def zeros(rows: int, cols: int, dtype=np.float64) -> Tensor2D:
    return as_tensor2d(np.zeros((rows, cols), dtype=dtype))


def matmul(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    a = as_tensor2d(a, "a")
    b = as_tensor2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: a is {a.shape[0]}x{a.shape[1]}, b is {b.shape[0]}x{b.shape[1]}; "
            f"a.cols ({a.shape[1]}) != b.rows ({b.shape[0]})"
        )
    return a @ b


def stable_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax along ``axis`` with max subtraction; works on any rank."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_rows(x: Tensor2D) -> Tensor2D:
    x = as_tensor2d(x, "x")
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax_rows: input contains NaN or infinity")
    return stable_softmax(x, axis=1)


def add(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    a = as_tensor2d(a, "a")
    b = as_tensor2d(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, a {a.shape} vs b {b.shape}")
    return a + b


def scale(a: Tensor2D, s: float) -> Tensor2D:
    a = as_tensor2d(a, "a")
    return a * a.dtype.type(s)


def concat_cols(parts: Sequence[Tensor2D]) -> Tensor2D:
    if not parts:
        raise ShapeError("concat_cols: need at least one part")
    parts = [as_tensor2d(p, f"parts[{i}]") for i, p in enumerate(parts)]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ: {[p.shape for p in parts]}")
    return np.concatenate(parts, axis=1)


def transpose(a: Tensor2D) -> Tensor2D:
    return np.ascontiguousarray(as_tensor2d(a, "a").T)


def relu(a: Tensor2D) -> Tensor2D:
    a = as_tensor2d(a, "a")
    return np.maximum(a, a.dtype.type(0))
