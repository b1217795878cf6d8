"""Synthetic embedding datasets for desk-scale training checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .training import LabeledDataset


def separable_dataset(n: int = 200, d: int = 16, t: int = 16, seed: int = 0,
                      margin: float = 1.0, noise: float = 0.5) -> LabeledDataset:
    """Two classes whose frames sit at +/- ``margin`` along a random unit direction."""
    rng = np.random.default_rng(seed)
    u = rng.normal(size=d)
    u /= np.linalg.norm(u)
    labels = np.arange(n) % 2
    sign = np.where(labels == 1, 1.0, -1.0)
    clips = sign[:, None, None] * margin * u + noise * rng.normal(size=(n, t, d))
    return LabeledDataset(clips, labels)


@dataclass
class TwoModalityTask:
    """Stacked ``[A | B]`` clips; A only identifies the class pair, B the member.

    With ``num_classes = 2k`` classes, modality A encodes only ``label // 2``
    (it cannot tell the two members of a pair apart) while modality B carries a
    weaker signal for the full label.
    """

    train: LabeledDataset
    val: LabeledDataset
    d: int

    def modality(self, ds: LabeledDataset, which: str) -> LabeledDataset:
        cols = slice(0, self.d) if which == "a" else slice(self.d, 2 * self.d)
        return LabeledDataset(ds.clips[:, :, cols], ds.labels)


def two_modality_task(n_train: int = 64, n_val: int = 400, d: int = 8, t: int = 8,
                      num_classes: int = 4, seed: int = 0, signal: float = 0.6,
                      signal_b: float = 0.4, noise: float = 1.0) -> TwoModalityTask:
    if num_classes % 2:
        raise ValueError("num_classes must be even")
    rng = np.random.default_rng(seed)
    proto_a = rng.normal(size=(num_classes // 2, d))
    proto_b = rng.normal(size=(num_classes, d))
    proto_a *= signal / np.linalg.norm(proto_a, axis=1, keepdims=True)
    proto_b *= signal_b / np.linalg.norm(proto_b, axis=1, keepdims=True)

    def make(n):
        labels = rng.integers(0, num_classes, size=n)
        a = proto_a[labels // 2][:, None, :] + noise * rng.normal(size=(n, t, d)) / np.sqrt(t)
        b = proto_b[labels][:, None, :] + noise * rng.normal(size=(n, t, d)) / np.sqrt(t)
        return LabeledDataset(np.concatenate([a, b], axis=2), labels)

    return TwoModalityTask(make(n_train), make(n_val), d)
