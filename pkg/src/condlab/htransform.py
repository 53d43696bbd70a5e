"""Likelihood-informed correction network for conditional sampling.

The correction h(x_t, y) is predicted by a small network whose inputs are
the state, the denoised estimate, the raw guidance gradient g, measurement
features, and time -- plus a residual path that multiplies g by a learned
time-dependent scalar. Zero-initialising the main branch and unit-
initialising the scalar makes the untrained network reproduce g exactly,
so fine-tuning starts from plain guidance and only has to learn the
correction.

The frozen base model is evaluated exactly once per forward evaluation;
gradient flow never reaches its parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import problems as prb
from .model import MLP, EpsilonModel, TimeEmbedding, tweedie
from .schedule import NoiseSchedule, forward_sample

__all__ = ["HTransformModel", "AmortisationSpec", "measurement_features",
           "feature_width", "h_forward", "correction_loss", "conditional_tweedie",
           "amortised_score_loss", "disable_guidance_skip"]


def feature_width(op) -> int:
    """Width of the measurement feature block fed to conditional networks."""
    if isinstance(op, prb.Mask):
        return 2 * op.in_dim          # scattered y plus the mask itself
    if isinstance(op, prb.LinearMatrix):
        return op.in_dim              # A^T y pullback
    if isinstance(op, prb.ClipHDR):
        return op.out_dim             # raw saturated measurement
    raise TypeError(f"unknown operator {type(op).__name__}")


def measurement_features(meas: prb.Measurement) -> np.ndarray:
    """Encode one measurement as a flat conditioning row."""
    op = meas.operator
    if isinstance(op, prb.Mask):
        return np.concatenate([op.scatter(meas.y), op.mask])
    if isinstance(op, prb.LinearMatrix):
        return op.A.T @ meas.y
    if isinstance(op, prb.ClipHDR):
        return np.asarray(meas.y, dtype=np.float64)
    raise TypeError(f"unknown operator {type(op).__name__}")


@dataclass(frozen=True)
class AmortisationSpec:
    """What the correction network amortises over.

    Measurements are always amortised (y is a network input). Setting
    over_operator additionally randomises the operator (mask pattern) per
    example during training; the mask feature block makes the operator
    visible to the network either way.
    """

    over_operator: bool = False

    @property
    def over_measurement(self) -> bool:
        return True


class HTransformModel:
    """Correction network h(x_t, k, y) operating in noise-prediction space.

    nn1 maps [x_t, xhat0, g, features, time] to a correction that starts at
    zero; nn2 maps time to a scalar residual scale that starts at exactly
    one, so the initial output is the raw guidance g.

    guidance_mode 'pointwise' (default) evaluates g as the likelihood
    gradient at the denoised point, treating the base model's Jacobian as
    blocked; 'jacobian' pulls the gradient back through the frozen base to
    the state, at the cost of a taped base evaluation.
    """

    GUIDANCE_MODES = ("pointwise", "jacobian")

    def __init__(self, data_dim: int, schedule: NoiseSchedule, operator,
                 hidden: Sequence[int] = (64, 64), nn2_hidden: int = 16,
                 time_dim: int = 16, seed: int = 0,
                 guidance_mode: str = "pointwise"):
        if guidance_mode not in self.GUIDANCE_MODES:
            raise ValueError(f"guidance_mode must be one of {self.GUIDANCE_MODES}")
        self.data_dim = data_dim
        self.schedule = schedule
        self.feature_width = feature_width(operator)
        self.guidance_mode = guidance_mode
        self.embed = TimeEmbedding(time_dim)
        rng = np.random.default_rng(seed)
        nn1_in = 3 * data_dim + self.feature_width + time_dim
        self.nn1 = MLP([nn1_in, *hidden, data_dim], rng, zero_final=True)
        self.nn2 = MLP([time_dim, nn2_hidden, 1], rng, zero_final=True)

    @property
    def params(self) -> list[np.ndarray]:
        return self.nn1.params + self.nn2.params

    @params.setter
    def params(self, new: list) -> None:
        n1 = len(self.nn1.params)
        self.nn1.params = list(new[:n1])
        self.nn2.params = list(new[n1:])

    @property
    def n_params(self) -> int:
        return self.nn1.n_params + self.nn2.n_params

    def param_budget_fraction(self, base: EpsilonModel) -> float:
        return self.n_params / base.n_params

    def time_features(self, k, batch: int) -> np.ndarray:
        tau = np.asarray(k, dtype=np.float64) / self.schedule.N
        emb = self.embed(tau)
        if emb.shape[0] == 1 and batch > 1:
            emb = np.repeat(emb, batch, axis=0)
        return emb

    def forward_parts(self, x_t: np.ndarray, k, xhat0: np.ndarray,
                      g: np.ndarray, feats: np.ndarray,
                      params: Optional[list] = None):
        """h = nn1([x_t, xhat0, g, feats, emb]) + (nn2(emb) + 1) * g."""
        B = x_t.shape[0]
        emb = self.time_features(k, B)
        ps = self.params if params is None else params
        n1 = len(self.nn1.params)
        taped = params is not None and any(
            isinstance(p, ad.Tensor) and p.tape is not None for p in ps)
        if taped:
            inp = np.concatenate([x_t, xhat0, g, feats, emb], axis=1)
            out1 = self.nn1.forward(ad.tensor(inp), params=ps[:n1])
            scale = ad.add(self.nn2.forward(ad.tensor(emb), params=ps[n1:]), 1.0)
            return ad.add(out1, ad.mul(scale, g))
        inp = np.concatenate([x_t, xhat0, g, feats, emb], axis=1)
        out1 = self.nn1.forward(inp, params=ps[:n1] if params else None)
        scale = self.nn2.forward(emb, params=ps[n1:] if params else None) + 1.0
        return out1 + scale * g


def _stack_measurements(measurements, batch: int, width: int):
    """Feature rows plus a per-row list of measurements."""
    if isinstance(measurements, prb.Measurement):
        measurements = [measurements] * batch
    if len(measurements) != batch:
        raise ValueError(
            f"got {len(measurements)} measurements for batch of {batch}")
    feats = np.stack([measurement_features(m) for m in measurements])
    if feats.shape[1] != width:
        raise ValueError(
            f"measurement features width {feats.shape[1]} != expected {width}")
    return feats, measurements


def _guidance_at(measurements, xhat0: np.ndarray) -> np.ndarray:
    rows = [prb.loglik_grad(m, xhat0[i]) for i, m in enumerate(measurements)]
    return np.stack(rows)


def _jacobian_guidance(eps_model: EpsilonModel, x_t: np.ndarray, k,
                       measurements) -> tuple[np.ndarray, np.ndarray]:
    """Likelihood gradient pulled back to x_t through the frozen base.

    One taped base evaluation yields both the noise prediction (as data)
    and the state-gradient of ln p(y | xhat0(x_t)).
    """
    B = x_t.shape[0]
    g = np.empty_like(x_t)
    eps_out = np.empty_like(x_t)
    for i in range(B):
        tape = ad.Tape()
        leaf = tape.leaf(x_t[i:i + 1])
        ki = int(np.asarray(k).ravel()[i]) if np.ndim(k) else int(k)
        eps_hat = eps_model.forward(leaf, ki)
        x0 = tweedie(leaf, eps_hat, ki, eps_model.schedule)
        m = measurements[i]
        pred = prb.apply(m.operator, x0)
        r = ad.sub(pred, m.y)
        sig = m.noise.guidance_sigma
        ll = ad.mul(ad.tsum(ad.square(r)), -0.5 / sig**2)
        g[i] = ad.backward(ll)[leaf][0]
        eps_out[i] = eps_hat.data[0]
    return g, eps_out


def h_forward(h: HTransformModel, eps_model: EpsilonModel, x_t, k,
              measurement, params: Optional[list] = None,
              eps_hat: Optional[np.ndarray] = None):
    """Correction in noise-prediction space, same shape as x_t.

    When eps_hat is supplied the caller has already run the frozen base at
    (x_t, k) and no further base call is made (pointwise mode); otherwise
    this evaluates the base exactly once.
    """
    x = x_t.data if isinstance(x_t, ad.Tensor) else np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.shape[1] != h.data_dim:
        raise ValueError(f"state width {xb.shape[1]} != data dim {h.data_dim}")
    feats, measurements = _stack_measurements(measurement, xb.shape[0], h.feature_width)

    if h.guidance_mode == "jacobian":
        g, eps_arr = _jacobian_guidance(eps_model, xb, k, measurements)
        xhat0 = tweedie(xb, eps_arr, k, eps_model.schedule)
    else:
        if eps_hat is None:
            eps_hat = eps_model.forward(xb, k)
        eps_arr = eps_hat.data if isinstance(eps_hat, ad.Tensor) else np.asarray(eps_hat)
        eps_arr = eps_arr[None, :] if eps_arr.ndim == 1 else eps_arr
        xhat0 = tweedie(xb, eps_arr, k, eps_model.schedule)
        g = _guidance_at(measurements, xhat0)

    out = h.forward_parts(xb, k, xhat0, g, feats, params=params)
    if single:
        return out[0]
    return out


def conditional_tweedie(h: HTransformModel, eps_model: EpsilonModel, x_t, k,
                        measurement, params: Optional[list] = None):
    """Corrected denoised estimate xhat0 - sqrt(1-abar)/sqrt(abar) * h."""
    ab = float(eps_model.schedule.abar(k))
    if ab <= 0:
        raise ZeroDivisionError("conditional tweedie at abar = 0 divides by zero")
    x = x_t.data if isinstance(x_t, ad.Tensor) else np.asarray(x_t, dtype=np.float64)
    eps_hat = eps_model.forward(x, k)
    x0 = tweedie(x, eps_hat, k, eps_model.schedule)
    corr = h_forward(h, eps_model, x, k, measurement, params=params,
                     eps_hat=eps_hat)
    coef = math.sqrt(1.0 - ab) / math.sqrt(ab)
    if isinstance(corr, ad.Tensor):
        return ad.sub(ad.tensor(x0), ad.mul(corr, coef))
    return x0 - coef * corr


def correction_loss(h: HTransformModel, eps_model: EpsilonModel, x0_batch,
                    measurements, rng: np.random.Generator,
                    params: Optional[list] = None):
    """Mean squared error of (h + frozen-base prediction) against the noise.

    Each example gets an independent uniform step in 1..N and fresh noise.
    Gradients flow only into the h parameters; the base is evaluated once.
    """
    x0 = np.atleast_2d(np.asarray(x0_batch, dtype=np.float64))
    B = x0.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    sched = eps_model.schedule
    ks = rng.integers(1, sched.N + 1, size=B)
    eps = rng.normal(size=x0.shape)
    x_t = forward_sample(sched, x0, ks, eps)
    eps_hat = eps_model.forward(x_t, ks)
    corr = h_forward(h, eps_model, x_t, ks, measurements, params=params,
                     eps_hat=eps_hat)
    resid = ad.sub(ad.add(corr, eps_hat), eps)
    return ad.tmean(ad.square(resid))


def amortised_score_loss(model: EpsilonModel, x0_batch, measurements,
                         rng: np.random.Generator,
                         params: Optional[list] = None):
    """Conditional noise-matching loss for a from-scratch network.

    The conditioning features ride in through the model's extra input
    block; an all-zero feature row degrades gracefully to the
    unconditional objective.
    """
    x0 = np.atleast_2d(np.asarray(x0_batch, dtype=np.float64))
    B = x0.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    if model.extra_inputs == 0:
        raise ValueError("model has no conditioning input block")
    feats, _ = _stack_measurements(measurements, B, model.extra_inputs)
    sched = model.schedule
    ks = rng.integers(1, sched.N + 1, size=B)
    eps = rng.normal(size=x0.shape)
    x_t = forward_sample(sched, x0, ks, eps)
    pred = model.forward(x_t, ks, params=params, cond=feats)
    resid = ad.sub(pred, eps)
    return ad.tmean(ad.square(resid))


def disable_guidance_skip(h: HTransformModel) -> HTransformModel:
    """Pin the multiplicative gate to -1 so the network starts at h = 0.

    The default initialisation outputs the raw guidance feature, which is
    the right starting point for residual fine-tuning but far too hot for
    control-style objectives evaluated in score space near the noisy end
    of the chain. Gradient flow through the gate is unaffected.
    """
    h.nn2.params[-1][:] = -1.0
    return h
