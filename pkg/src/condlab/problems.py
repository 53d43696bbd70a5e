"""Forward operators, measurement noise, and likelihood gradients.

Three operator families cover the conditioning tasks: coordinate masks
(inpainting / motif observation), dense linear maps, and the saturating
clip(2x, -1, 1) range-compression operator. The likelihood gradient is the
exact gradient of the Gaussian log-density; the saturating operator also
offers the cheap Jacobian-free surrogate as a selectable mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad

__all__ = ["Mask", "LinearMatrix", "ClipHDR", "NoiseModel", "Measurement",
           "apply", "sample_measurement", "loglik", "loglik_grad"]


@dataclass(frozen=True)
class Mask:
    """Selects the coordinates where mask == 1."""

    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=np.float64)
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask entries must be 0 or 1")
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @property
    def in_dim(self) -> int:
        return self.mask.shape[0]

    @property
    def out_dim(self) -> int:
        return int(self.mask.sum())

    @property
    def observed_idx(self) -> np.ndarray:
        return np.flatnonzero(self.mask == 1)

    def scatter(self, y) -> np.ndarray:
        """Embed observed values back at their coordinates, zeros elsewhere."""
        y = np.asarray(y, dtype=np.float64)
        single = y.ndim == 1
        yb = np.atleast_2d(y)
        out = np.zeros((yb.shape[0], self.in_dim))
        out[:, self.observed_idx] = yb
        return out[0] if single else out


@dataclass(frozen=True)
class LinearMatrix:
    """Dense linear operator y = A x."""

    A: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        A.setflags(write=False)
        object.__setattr__(self, "A", A)

    @property
    def in_dim(self) -> int:
        return self.A.shape[1]

    @property
    def out_dim(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class ClipHDR:
    """Saturating range compressor y = clip(2x, -1, 1).

    surrogate_jacobian drops the operator Jacobian in the likelihood
    gradient and pulls the residual back with the constant factor 0.5
    (a cheap approximation mode); the default differentiates the clip.
    """

    dim: int
    surrogate_jacobian: bool = False

    @property
    def in_dim(self) -> int:
        return self.dim

    @property
    def out_dim(self) -> int:
        return self.dim


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "gaussian"
    sigma_y: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "noiseless"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind == "gaussian" and not self.sigma_y > 0:
            raise ValueError("sigma_y must be positive for gaussian noise")

    @property
    def guidance_sigma(self) -> float:
        """Scale used in the likelihood gradient; noiseless tasks use the
        Gaussian surrogate with unit scale."""
        return self.sigma_y if self.kind == "gaussian" else 1.0


@dataclass(frozen=True)
class Measurement:
    y: np.ndarray
    operator: object
    noise: NoiseModel

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        y.setflags(write=False)
        object.__setattr__(self, "y", y)
        if y.shape[-1] != self.operator.out_dim:
            raise ValueError(
                f"y width {y.shape[-1]} != operator output {self.operator.out_dim}")


def _check_width(op, x):
    if x.shape[-1] != op.in_dim:
        raise ValueError(f"input width {x.shape[-1]} != operator input {op.in_dim}")


def apply(op, x):
    """Forward map; accepts arrays or tensors of shape (d,) or (B, d)."""
    _check_width(op, x)
    if isinstance(op, Mask):
        idx = op.observed_idx
        if isinstance(x, ad.Tensor):
            return x[..., idx] if x.ndim == 2 else x[idx]
        return np.asarray(x, dtype=np.float64)[..., idx]
    if isinstance(op, LinearMatrix):
        if isinstance(x, ad.Tensor):
            return ad.matmul(x, op.A.T)
        return np.asarray(x, dtype=np.float64) @ op.A.T
    if isinstance(op, ClipHDR):
        if isinstance(x, ad.Tensor):
            return ad.clip(ad.mul(x, 2.0), -1.0, 1.0)
        return np.clip(2.0 * np.asarray(x, dtype=np.float64), -1.0, 1.0)
    raise TypeError(f"unknown operator {type(op).__name__}")


def sample_measurement(op, noise: NoiseModel, x0, rng: np.random.Generator) -> Measurement:
    """Simulate y from a clean point: exact for noiseless, Gaussian otherwise."""
    clean = apply(op, x0)
    clean = clean.data if isinstance(clean, ad.Tensor) else clean
    if noise.kind == "gaussian":
        y = clean + noise.sigma_y * rng.normal(size=clean.shape)
    else:
        y = clean.copy()
    return Measurement(y=y, operator=op, noise=noise)


def loglik(meas: Measurement, x0_hat) -> np.ndarray:
    """ln p(y | x0_hat) under the Gaussian model (surrogate when noiseless)."""
    pred = apply(meas.operator, x0_hat)
    pred = pred.data if isinstance(pred, ad.Tensor) else pred
    sig = meas.noise.guidance_sigma
    r = pred - meas.y
    p = meas.operator.out_dim
    sq = np.sum(r * r, axis=-1)
    return -0.5 * sq / sig**2 - p * (0.5 * math.log(2 * math.pi) + math.log(sig))


def loglik_grad(meas: Measurement, x0_hat):
    """Exact gradient of ln p(y | x0_hat) with respect to x0_hat.

    Mask and LinearMatrix use the closed-form pullback; the saturating
    operator multiplies by its subgradient (zero outside the open interval
    (-0.5, 0.5) in x) unless the surrogate mode replaces the Jacobian by
    the constant 0.5.
    """
    op = meas.operator
    x = x0_hat.data if isinstance(x0_hat, ad.Tensor) else np.asarray(x0_hat, dtype=np.float64)
    _check_width(op, x)
    sig = meas.noise.guidance_sigma
    pred = apply(op, x)
    r = pred - meas.y
    if isinstance(op, Mask):
        single = x.ndim == 1
        out = op.scatter(-r / sig**2)
        return out if not single else np.asarray(out)
    if isinstance(op, LinearMatrix):
        return -(r @ op.A) / sig**2
    if isinstance(op, ClipHDR):
        jac = 0.5 if op.surrogate_jacobian else 2.0 * ((x > -0.5) & (x < 0.5))
        return -(r * jac) / sig**2
    raise TypeError(f"unknown operator {type(op).__name__}")
