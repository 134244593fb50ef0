"""Latency labels to per-example training weights, plus weighted resampling.

Lower latency must mean higher weight.  The transform is a three-stage
pipeline: clamp-and-log to tame the heavy tail, a power compression with
exponent in (0, 1], then an affine map onto [eps, w_max] computed from the
valid designs only.  Invalid designs (or perf <= 0, which encodes failure)
get exactly eps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class WeightParams:
    eps0: float = 1e-8  # floor applied to latency before the log
    power_p: float = 0.5  # compression exponent
    eps: float = 0.01  # weight floor
    w_max: float = 1.0  # weight ceiling

    def __post_init__(self) -> None:
        if not 0.0 < self.power_p <= 1.0:
            raise ValueError("power_p must be in (0, 1]")
        if not 0.0 < self.eps < self.w_max:
            raise ValueError("need 0 < eps < w_max")
        if self.eps0 <= 0.0:
            raise ValueError("eps0 must be positive")


@dataclass(frozen=True)
class ResampleParams:
    tau: float = 0.5  # weight threshold separating high from low
    repeats: int = 3  # times the high-weight block is repeated
    keep_frac: float = 0.5  # fraction of low-weight examples kept
    seed: int = 0

    def __post_init__(self) -> None:
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if not 0.0 <= self.keep_frac <= 1.0:
            raise ValueError("keep_frac must be in [0, 1]")


def latency_to_weights(
    perfs: Sequence[float],
    valid: Sequence[bool],
    params: WeightParams = WeightParams(),
) -> np.ndarray:
    """Map latencies to weights in [eps, w_max], higher for faster designs.

    Statistics (z_min, z_max) come from valid entries only; the fastest
    valid design gets exactly w_max, the slowest exactly eps, invalid
    entries exactly eps.  All weights equal when every valid z coincides.
    """
    perfs_a = np.asarray(perfs, dtype=np.float64)
    valid_a = np.asarray(valid, dtype=bool)
    if perfs_a.shape != valid_a.shape:
        raise ValueError("perfs and valid must have equal length")
    ok = valid_a & (perfs_a > 0.0)
    out = np.full(perfs_a.shape, params.eps, dtype=np.float64)
    if not ok.any():
        return out
    z = np.log1p(np.maximum(perfs_a[ok], params.eps0)) ** params.power_p
    z_min, z_max = z.min(), z.max()
    if z_max == z_min:
        out[ok] = params.w_max
        return out
    w = params.eps + (z_max - z) / (z_max - z_min) * (params.w_max - params.eps)
    w[z == z_min] = params.w_max
    w[z == z_max] = params.eps
    out[ok] = np.clip(w, params.eps, params.w_max)
    return out


def resample(
    weights: Sequence[float], params: ResampleParams = ResampleParams()
) -> np.ndarray:
    """Indices of a resampled dataset: the high-weight block (w >= tau, ties
    high) repeated `repeats` times, followed by a seeded sample without
    replacement of floor(keep_frac * |low|) low-weight indices."""
    w = np.asarray(weights, dtype=np.float64)
    high = np.flatnonzero(w >= params.tau)
    low = np.flatnonzero(w < params.tau)
    n_low = int(np.floor(params.keep_frac * low.size))
    rng = np.random.Generator(np.random.PCG64(params.seed))
    kept = rng.choice(low, size=n_low, replace=False) if n_low else low[:0]
    return np.concatenate([np.tile(high, params.repeats), kept]).astype(np.int64)
