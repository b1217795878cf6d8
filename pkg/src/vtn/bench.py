"""CPU timing harness for the decoder, reported next to analytic costs."""

from __future__ import annotations

import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .cost import (CostBreakdown, PUBLISHED_FPS, PUBLISHED_TOTAL_GMAC, count_macs,
                   count_params)
from .decoder import DecoderWeights, classify_clip


def hardware_string() -> str:
    model = platform.processor() or ""
    try:
        with open("/proc/cpuinfo") as f:
            for line in f:
                if line.startswith("model name"):
                    model = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return f"{model or platform.machine()} ({os.cpu_count()} logical CPUs, {platform.system()})"


@dataclass
class CostReport:
    params: CostBreakdown
    macs: CostBreakdown
    times_s: list[float] = field(default_factory=list)
    seq_len: int = 16
    threads: int | None = None
    hardware: str = ""

    @property
    def median_s(self) -> float:
        return float(np.median(self.times_s))

    @property
    def p95_s(self) -> float:
        return float(np.percentile(self.times_s, 95))

    @property
    def elapsed_s(self) -> float:
        return float(np.sum(self.times_s))

    @property
    def clips_per_s(self) -> float:
        return len(self.times_s) / self.elapsed_s

    @property
    def frames_per_s(self) -> float:
        # every clip carries seq_len frames
        return self.seq_len * len(self.times_s) / self.elapsed_s

    def lines(self) -> list[str]:
        out = [f"hardware: {self.hardware}",
               f"threads: {self.threads if self.threads else 'default'}",
               "component,params,macs"]
        for name in self.params.components:
            out.append(f"{name},{self.params[name]},{self.macs.components.get(name, 0)}")
        for name in self.macs.components:
            if name not in self.params.components:
                out.append(f"{name},0,{self.macs[name]}")
        out += [
            f"total,{self.params.total},{self.macs.total}",
            f"decoder GMAC per clip: {self.macs.total / 1e9:.4f}",
            f"repeats: {len(self.times_s)}",
            f"median ms per clip: {self.median_s * 1e3:.3f}",
            f"p95 ms per clip: {self.p95_s * 1e3:.3f}",
            f"clips/s: {self.clips_per_s:.1f}",
            f"frames/s (seq_len x clips / elapsed): {self.frames_per_s:.1f}",
            "note: decoder only; no frame encoder is timed or counted",
            f"published reference (encoder-inclusive, ResNet-34 RGB): "
            f"{PUBLISHED_TOTAL_GMAC} GMAC, {PUBLISHED_FPS} FPS",
        ]
        return out


def bench(weights: DecoderWeights, repeats: int = 100, warmup: int = 10,
          threads: int | None = None, seed: int = 0) -> CostReport:
    """Time ``repeats`` float32 clip forwards on random input after ``warmup`` runs."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    cfg = weights.config
    w32 = weights.astype(np.float32)
    x = np.random.default_rng(seed).standard_normal((cfg.seq_len, cfg.input_dim)).astype(np.float32)
    times = []
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            classify_clip(x, w32)
        for _ in range(repeats):
            t0 = time.perf_counter()
            classify_clip(x, w32)
            times.append(time.perf_counter() - t0)
    return CostReport(count_params(cfg), count_macs(cfg), times, cfg.seq_len, threads,
                      hardware_string())
