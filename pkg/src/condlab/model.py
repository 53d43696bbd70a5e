"""Noise-prediction networks and parametrisation conversions.

Networks are plain silu MLPs over [state, sinusoidal-time] features. A
forward pass routes through the autodiff engine only when some input is
taped (training, or input-gradient guidance); pure inference runs as plain
numpy and returns plain arrays.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .schedule import NoiseSchedule

__all__ = ["TimeEmbedding", "MLP", "EpsilonModel",
           "eps_forward", "eps_to_score", "eps_to_mean", "tweedie"]


class TimeEmbedding:
    """Sinusoidal features of normalised time, componentwise in [-1, 1]."""

    def __init__(self, dim: int = 16, max_freq: float = 1000.0):
        if dim % 2 != 0 or dim < 2:
            raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
        self.dim = dim
        half = dim // 2
        exponents = np.arange(half) / max(half - 1, 1)
        self.freqs = (math.pi / 2.0) * max_freq ** exponents

    def __call__(self, tau) -> np.ndarray:
        """tau: scalar or (B,) array of normalised times (typically k/N)."""
        tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
        ang = tau[:, None] * self.freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _glorot(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _is_taped(x) -> bool:
    return isinstance(x, ad.Tensor) and x.tape is not None


class MLP:
    """silu MLP storing parameters as a flat list [W0, b0, W1, b1, ...]."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator,
                 zero_final: bool = False):
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        self.widths = list(widths)
        self.params: list[np.ndarray] = []
        for i in range(len(widths) - 1):
            W = _glorot(rng, widths[i], widths[i + 1])
            if zero_final and i == len(widths) - 2:
                W = np.zeros_like(W)
            self.params.append(W)
            self.params.append(np.zeros(widths[i + 1]))

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def forward(self, x, params: Optional[list] = None):
        """x: (B, widths[0]). Tape-aware when x or any parameter is taped."""
        ps = self.params if params is None else params
        taped = _is_taped(x) or any(_is_taped(p) for p in ps)
        n_layers = len(self.widths) - 1
        if not taped:
            h = x.data if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)
            for i in range(n_layers):
                W = ps[2 * i].data if isinstance(ps[2 * i], ad.Tensor) else ps[2 * i]
                b = ps[2 * i + 1].data if isinstance(ps[2 * i + 1], ad.Tensor) else ps[2 * i + 1]
                h = h @ W + b
                if i < n_layers - 1:
                    h = h * _sigmoid(h)
            return h
        h = x
        for i in range(n_layers):
            h = ad.add(ad.matmul(h, ps[2 * i]), ps[2 * i + 1])
            if i < n_layers - 1:
                h = ad.silu(h)
        return h


class EpsilonModel:
    """Unconditional noise predictor eps(x_k, k) for flat vectors.

    extra_inputs widens the input block for conditioning features (used by
    the amortised conditional variant); the unconditional model leaves it 0.
    """

    def __init__(self, data_dim: int, schedule: NoiseSchedule,
                 hidden: Sequence[int] = (128, 128, 128),
                 time_dim: int = 16, seed: int = 0, zero_final: bool = False,
                 extra_inputs: int = 0):
        if data_dim < 1:
            raise ValueError("data_dim must be positive")
        self.data_dim = data_dim
        self.schedule = schedule
        self.embed = TimeEmbedding(time_dim)
        widths = [data_dim + extra_inputs + time_dim, *hidden, data_dim]
        self.net = MLP(widths, np.random.default_rng(seed), zero_final=zero_final)
        self.extra_inputs = extra_inputs

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params

    @params.setter
    def params(self, new: list) -> None:
        self.net.params = list(new)

    @property
    def n_params(self) -> int:
        return self.net.n_params

    def time_features(self, k, batch: int) -> np.ndarray:
        """Embedding rows for step index k (scalar or per-row array)."""
        tau = np.asarray(k, dtype=np.float64) / self.schedule.N
        emb = self.embed(tau)
        if emb.shape[0] == 1 and batch > 1:
            emb = np.repeat(emb, batch, axis=0)
        return emb

    def forward(self, x_t, k, params: Optional[list] = None, cond=None):
        """Predicted noise; accepts (d,) or (B, d), arrays or tensors.

        cond, when given, is an extra feature block of width extra_inputs,
        broadcast over the batch if passed as a single row. The per-channel
        time trick of motif conditioning passes cond rows that already
        carry their own time information.
        """
        if x_t.shape[-1] != self.data_dim:
            raise ValueError(
                f"state width {x_t.shape[-1]} != data dim {self.data_dim}")
        want = self.data_dim + self.extra_inputs
        single = len(x_t.shape) == 1
        xb = x_t
        if single:
            xb = ad.broadcast_to(x_t, (1, self.data_dim)) if isinstance(x_t, ad.Tensor) \
                else np.asarray(x_t, dtype=np.float64)[None, :]
        B = xb.shape[0]
        blocks = [xb]
        if cond is not None:
            cb = np.asarray(cond.data if isinstance(cond, ad.Tensor) else cond,
                            dtype=np.float64)
            cb = np.atleast_2d(cb)
            if cb.shape[0] == 1 and B > 1:
                cb = np.repeat(cb, B, axis=0)
            blocks.append(cb)
        feat_width = sum(b.shape[1] for b in blocks)
        if feat_width != want:
            raise ValueError(
                f"state+conditioning width {feat_width} != expected {want}")
        blocks.append(self.time_features(k, B))
        if _is_taped(xb) or (params is not None and any(_is_taped(p) for p in params)):
            feats = ad.concat(blocks, axis=1)
        else:
            feats = np.concatenate(
                [b.data if isinstance(b, ad.Tensor) else b for b in blocks], axis=1)
        out = self.net.forward(feats, params=params)
        return out[0] if single else out


def eps_forward(model: EpsilonModel, x_t, k, params: Optional[list] = None):
    """Predicted noise for state x_t at step k; shape follows x_t."""
    return model.forward(x_t, k, params=params)


def _abar_factor(schedule: NoiseSchedule, k, like):
    ab = schedule.abar(k)
    if np.ndim(ab) == 1 and len(like.shape) == 2:
        return ab[:, None]
    return ab


def eps_to_score(eps_hat, k, schedule: NoiseSchedule):
    """Score-space view: s = -eps / sqrt(1 - abar_k). Rejects k = 0."""
    ab = _abar_factor(schedule, k, eps_hat)
    if np.any(np.asarray(ab) >= 1.0):
        raise ZeroDivisionError(
            "eps_to_score at a step with abar = 1 (k = 0) divides by zero")
    if isinstance(eps_hat, ad.Tensor):
        return ad.mul(eps_hat, -1.0 / np.sqrt(1.0 - ab))
    return -eps_hat / np.sqrt(1.0 - ab)


def eps_to_mean(x_t, eps_hat, k, schedule: NoiseSchedule):
    """Reverse-step mean (x_t - beta_k / sqrt(1 - abar_k) eps) / sqrt(1 - beta_k)."""
    beta = schedule.beta_at(k)
    ab = _abar_factor(schedule, k, x_t)
    if np.ndim(beta) == 1 and len(x_t.shape) == 2:
        beta = beta[:, None]
    coef = beta / np.sqrt(1.0 - ab)
    scale = 1.0 / np.sqrt(1.0 - beta)
    if isinstance(x_t, ad.Tensor) or isinstance(eps_hat, ad.Tensor):
        return ad.mul(ad.sub(x_t, ad.mul(eps_hat, coef)), scale)
    return (x_t - coef * eps_hat) * scale


def tweedie(x_t, eps_hat, k, schedule: NoiseSchedule):
    """Denoised estimate (x_t - sqrt(1 - abar_k) eps) / sqrt(abar_k)."""
    ab = _abar_factor(schedule, k, x_t)
    if np.any(np.asarray(ab) <= 0.0):
        raise ZeroDivisionError("tweedie at abar = 0 divides by zero")
    coef = np.sqrt(1.0 - ab)
    scale = 1.0 / np.sqrt(ab)
    if isinstance(x_t, ad.Tensor) or isinstance(eps_hat, ad.Tensor):
        return ad.mul(ad.sub(x_t, ad.mul(eps_hat, coef)), scale)
    return (x_t - coef * eps_hat) * scale
