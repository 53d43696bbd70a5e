"""Variance-preserving noise schedules, forward noising, and time grids.

Conventions fixed across the package:
  - discrete step index k runs 1..N; k=0 is clean data,
  - alpha_bar[k] is the signal fraction at step k with alpha_bar[0] = 1 and
    alpha_bar[k] = alpha_bar[k-1] * (1 - beta[k]),
  - the continuous-time drift convention is -beta(t)/2 * x, so
    alpha_bar(t) = exp(-int_0^t beta).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NoiseSchedule",
    "TimeGrid",
    "build_linear",
    "build_cosine",
    "continuous_consistency",
    "forward_sample",
    "build_time_grid",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete VP schedule. Immutable; share freely across workers.

    beta[k-1] holds beta_k for k = 1..N; alpha_bar[k] holds the cumulative
    product for k = 0..N.
    """

    N: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    kind: str

    def __post_init__(self):
        for name in ("beta", "alpha_bar"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.beta.shape != (self.N,):
            raise ValueError(f"beta must have shape ({self.N},), got {self.beta.shape}")
        if self.alpha_bar.shape != (self.N + 1,):
            raise ValueError(
                f"alpha_bar must have shape ({self.N + 1},), got {self.alpha_bar.shape}"
            )

    def beta_at(self, k):
        """beta_k for scalar or array k in 1..N."""
        k = np.asarray(k)
        if np.any(k < 1) or np.any(k > self.N):
            raise ValueError(f"step index {k} outside 1..{self.N}")
        return self.beta[k - 1]

    def abar(self, k):
        """alpha_bar_k for scalar or array k in 0..N."""
        k = np.asarray(k)
        if np.any(k < 0) or np.any(k > self.N):
            raise ValueError(f"step index {k} outside 0..{self.N}")
        return self.alpha_bar[k]

    def to_manifest(self) -> dict:
        return {"kind": self.kind, "N": int(self.N),
                "beta_first": float(self.beta[0]), "beta_last": float(self.beta[-1])}


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing sampling times in [0, 1]."""

    K: int
    points: np.ndarray
    spacing: str

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.points.shape != (self.K,):
            raise ValueError(f"points must have shape ({self.K},)")
        if not np.all(np.diff(self.points) > 0):
            raise ValueError("time grid must be strictly increasing")
        if self.points[0] < 0 or self.points[-1] > 1:
            raise ValueError("time grid endpoints must lie in [0, 1]")


def build_linear(beta0: float = 1e-4, betaN: float = 2e-2, N: int = 1000) -> NoiseSchedule:
    """Linearly interpolated betas from beta0 (k=1) to betaN (k=N)."""
    if not (0.0 < beta0 <= betaN < 1.0):
        raise ValueError(f"need 0 < beta0 <= betaN < 1, got ({beta0}, {betaN})")
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    beta = np.linspace(beta0, betaN, N) if N > 1 else np.array([beta0])
    alpha_bar = np.empty(N + 1)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(1.0 - beta)
    return NoiseSchedule(N=N, beta=beta, alpha_bar=alpha_bar, kind="linear")


def build_cosine(N: int = 1000, offset: float = 0.008, beta_max: float = 0.999) -> NoiseSchedule:
    """Squared-cosine signal profile with the usual small-offset shift.

    Betas derived from the profile are clipped to (0, beta_max] and
    alpha_bar is then recomputed from the clipped betas so the recurrence
    alpha_bar[k] = alpha_bar[k-1] * (1 - beta[k]) holds exactly.
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    k = np.arange(N + 1, dtype=np.float64)
    f = np.cos((k / N + offset) / (1.0 + offset) * np.pi / 2.0) ** 2
    profile = f / f[0]
    beta = 1.0 - profile[1:] / profile[:-1]
    beta = np.clip(beta, 1e-12, beta_max)
    alpha_bar = np.empty(N + 1)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(1.0 - beta)
    return NoiseSchedule(N=N, beta=beta, alpha_bar=alpha_bar, kind="cosine")


def continuous_consistency(schedule: NoiseSchedule) -> float:
    """Max relative gap between beta_k and the log-alpha_bar decrement.

    In the continuous limit beta(t) = -d/dt ln alpha_bar(t); discretely the
    decrement is -ln(1 - beta_k) = beta_k + O(beta_k^2), so the returned
    deviation is expected O(beta_k) small for fine schedules.
    """
    log_ab = np.log(schedule.alpha_bar)
    decrement = log_ab[:-1] - log_ab[1:]
    return float(np.max(np.abs(schedule.beta - decrement) / schedule.beta))


def forward_sample(schedule: NoiseSchedule, x0, k, eps):
    """Noised sample sqrt(abar_k) x0 + sqrt(1 - abar_k) eps.

    x0 and eps may be arrays or engine tensors of shape (d,) or (B, d);
    k may be a scalar in 0..N or a per-row integer array.
    """
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    abar = schedule.abar(k)
    if np.ndim(abar) == 1:
        if len(x0.shape) != 2 or x0.shape[0] != abar.shape[0]:
            raise ValueError(
                f"per-row k of length {abar.shape[0]} needs x0 of shape (B, d), got {x0.shape}"
            )
        abar = abar[:, None]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def build_time_grid(K: int, spacing: str = "uniform") -> TimeGrid:
    """Equispaced points on [0, 1], optionally squared to densify near 0."""
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    base = np.linspace(0.0, 1.0, K)
    if spacing == "uniform":
        points = base
    elif spacing == "square-root":
        points = base ** 2
    else:
        raise ValueError(f"unknown spacing {spacing!r}")
    return TimeGrid(K=K, points=points, spacing=spacing)
