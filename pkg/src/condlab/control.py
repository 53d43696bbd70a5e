"""Stochastic-control fine-tuning tools: controlled reverse-chain
simulation, the discretised control objective, the pathwise density-ratio
log (RND), variance and balance losses over it, per-step gradient
subsampling, and the terminal-value bias probe.

Conventions fixed here:
- alpha_i = 1 - abar(k_hi)/abar(k_lo) for the jump k_hi -> k_lo, which
  reduces to beta_k on the full grid.
- The chain is H' = sqrt(1-alpha) H + alpha (H + s + h) + sqrt(alpha) xi
  with s the marginal score of the base model; the (H + s) pairing keeps
  N(0, I) data exactly stationary, which a bare s would not.
- Controls live in score space throughout.
- rnd_log = sum_k [-(alpha/2)|h|^2 + alpha g.h + sqrt(alpha) h.xi]
  - ln p(y|H_0), Ito discretisation with the same xi that drove the state.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from . import htransform as ht
from . import problems as prb
from .model import eps_to_score
from .schedule import NoiseSchedule, TimeGrid

__all__ = ["Trajectory", "ControlObjective", "simulate_controlled",
           "kl_control_loss", "rnd_log", "rnd_log_taped", "vargrad_loss",
           "tb_loss", "subsample_gradients", "value_bias_probe",
           "score_control_from_h", "trajectory_csv", "loglik_taped",
           "train_control"]


@dataclass
class Trajectory:
    """One simulated batch of controlled reverse paths.

    Index i runs in simulation order: states[0] is the start (most noised),
    states[K] the end. alphas[i], controls[i], noises[i] belong to the jump
    from states[i] to states[i+1].
    """

    ks: np.ndarray                # (K+1,) schedule indices, N .. 0
    alphas: np.ndarray            # (K,)
    states: np.ndarray            # (K+1, n, d)
    controls: np.ndarray          # (K, n, d) live control values h
    ref_controls: Optional[np.ndarray]  # (K, n, d) reference g, or None
    noises: np.ndarray            # (K, n, d)
    terminal_loglik: np.ndarray   # (n,)
    quad: np.ndarray              # (K, n) -(alpha/2)|h|^2
    cross: np.ndarray             # (K, n)  alpha g.h
    mart: np.ndarray              # (K, n)  sqrt(alpha) h.xi
    measurement: prb.Measurement
    taped_cost: Optional[ad.Tensor] = None      # (n,) live running cost
    taped_terminal: Optional[ad.Tensor] = None  # (n,) live ln p(y|H_0)
    grad_scale: Optional[np.ndarray] = None     # (K,) subsample scaling

    @property
    def batch(self) -> int:
        return self.states.shape[1]

    @property
    def n_steps(self) -> int:
        return self.alphas.shape[0]


@dataclass(frozen=True)
class ControlObjective:
    kind: str = "kl"
    batch_size: int = 64
    subsample: float = 1.0
    tb_k_init: float = 0.0

    KINDS = ("kl", "vargrad", "tb")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown control objective {self.kind!r}")
        if not (0.0 < self.subsample <= 1.0):
            raise ValueError("subsample fraction must be in (0, 1]")
        if self.kind in ("vargrad", "tb") and self.batch_size < 2:
            raise ValueError(f"{self.kind} needs batch size >= 2")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")


def loglik_taped(meas: prb.Measurement, x0_hat: ad.Tensor) -> ad.Tensor:
    """ln p(y | x0_hat) as a differentiable per-row value."""
    pred = prb.apply(meas.operator, x0_hat)
    sig = meas.noise.guidance_sigma
    resid = ad.sub(pred, np.atleast_1d(meas.y))
    sq = ad.tsum(ad.square(resid), axis=1)
    p = meas.operator.out_dim
    const = p * (0.5 * math.log(2 * math.pi) + math.log(sig))
    return ad.sub(ad.mul(sq, -0.5 / sig**2), const)


def _grid_indices(grid: Union[TimeGrid, int], schedule: NoiseSchedule) -> np.ndarray:
    if isinstance(grid, int):
        if grid < 1 or grid > schedule.N:
            raise ValueError(f"grid size {grid} not in 1..{schedule.N}")
        ks = np.round(np.linspace(0, schedule.N, grid + 1)).astype(int)
    else:
        ks = np.round(np.asarray(grid.points) * schedule.N).astype(int)
    if ks[0] != 0 or ks[-1] != schedule.N or np.any(np.diff(ks) <= 0):
        raise ValueError("grid must map to strictly increasing schedule "
                         "indices spanning 0..N")
    return ks[::-1].copy()  # simulation order: N .. 0


def simulate_controlled(eps_model, control_fn: Callable, schedule: NoiseSchedule,
                        grid: Union[TimeGrid, int], measurement: prb.Measurement,
                        rng: Optional[np.random.Generator], n: int = 1,
                        params: Optional[list] = None,
                        ref_fn: Optional[Callable] = None,
                        replay: Optional[Trajectory] = None) -> Trajectory:
    """Run the controlled reverse chain from H ~ N(0, I).

    control_fn(x, k, params=None, eps_hat=None) returns the score-space
    control. With `params` (tape leaves) the whole simulation is taped:
    gradients flow through states, and the running cost and terminal
    log-likelihood come back as live tensors. With `ref_fn` the chain is
    driven by the reference control g while the live control is only
    recorded. `replay` reuses a trajectory's start state and noise draws.
    """
    ks = _grid_indices(grid, schedule)
    K = len(ks) - 1
    d = eps_model.data_dim
    taped = params is not None
    if taped and ref_fn is not None:
        raise ValueError("a taped simulation is driven by the live control; "
                         "reference controls only apply to plain simulations")

    if replay is None and rng is None:
        raise ValueError("rng is required unless replaying a trajectory")
    if replay is not None:
        if replay.states.shape[2] != d or replay.n_steps != K:
            raise ValueError("replay trajectory does not match grid/model")
        H = replay.states[0].copy()
        n = H.shape[0]
        noises = replay.noises
    else:
        H = rng.normal(size=(n, d))
        noises = None

    states = np.empty((K + 1, n, d))
    controls = np.empty((K, n, d))
    refs = np.empty((K, n, d))
    noise_rec = np.empty((K, n, d))
    quad = np.empty((K, n))
    cross = np.empty((K, n))
    mart = np.empty((K, n))
    alphas = np.empty(K)
    states[0] = H

    x = ad.tensor(H) if taped else H
    cost = None
    for i in range(K):
        k_hi, k_lo = int(ks[i]), int(ks[i + 1])
        ab_hi, ab_lo = schedule.abar(k_hi), schedule.abar(k_lo)
        alpha = 1.0 - ab_hi / ab_lo
        alphas[i] = alpha

        eps_hat = eps_model.forward(x, k_hi)
        s = eps_to_score(eps_hat, k_hi, schedule)
        if taped:
            h = control_fn(x, k_hi, params=params, eps_hat=eps_hat)
            h_val = h.data if isinstance(h, ad.Tensor) else np.asarray(h)
            g_val = h_val  # reference is the detached live control
            step_cost = ad.mul(ad.tsum(ad.square(h), axis=1), alpha / 2.0)
            cost = step_cost if cost is None else ad.add(cost, step_cost)
            drive = h
        else:
            h_val = np.asarray(control_fn(x, k_hi, eps_hat=eps_hat))
            if ref_fn is not None:
                g_val = np.asarray(ref_fn(x, k_hi, eps_hat=eps_hat))
            else:
                g_val = h_val
            drive = g_val

        xi = noises[i] if noises is not None else rng.normal(size=(n, d))
        noise_rec[i] = xi
        controls[i] = h_val
        refs[i] = g_val
        quad[i] = -(alpha / 2.0) * np.sum(h_val * h_val, axis=1)
        cross[i] = alpha * np.sum(g_val * h_val, axis=1)
        mart[i] = math.sqrt(alpha) * np.sum(h_val * xi, axis=1)

        if taped:
            inner = ad.add(ad.add(x, s), drive)
            x = ad.add(ad.add(ad.mul(x, math.sqrt(1.0 - alpha)),
                              ad.mul(inner, alpha)),
                       math.sqrt(alpha) * xi)
            x_val = x.data
        else:
            x = math.sqrt(1.0 - alpha) * x + alpha * (x + s + drive) \
                + math.sqrt(alpha) * xi
            x_val = x
        if not np.all(np.isfinite(x_val)):
            raise RuntimeError(f"non-finite state at step index {i} "
                               f"(schedule index {k_hi})")
        states[i + 1] = x_val

    if taped:
        terminal = loglik_taped(measurement, x)
        terminal_val = terminal.data.copy()
    else:
        terminal = None
        terminal_val = prb.loglik(measurement, x)
        cost = None

    return Trajectory(ks=ks, alphas=alphas, states=states, controls=controls,
                      ref_controls=refs, noises=noise_rec,
                      terminal_loglik=np.atleast_1d(terminal_val),
                      quad=quad, cross=cross, mart=mart,
                      measurement=measurement,
                      taped_cost=cost, taped_terminal=terminal)


def kl_control_loss(traj: Trajectory):
    """Batch mean of sum_k (alpha_k/2)|h_k|^2 - ln p(y|H_0).

    Returns a live tensor when the trajectory was simulated taped, else
    a plain float.
    """
    if traj.batch == 0:
        raise ValueError("empty batch")
    if traj.taped_cost is not None:
        return ad.tmean(ad.sub(traj.taped_cost, traj.taped_terminal))
    running = -traj.quad.sum(axis=0)  # quad stores the negated cost
    return float(np.mean(running - traj.terminal_loglik))


def rnd_log(traj: Trajectory, g_is_reference: bool = True) -> np.ndarray:
    """Pathwise log density ratio per batch element, from recorded values."""
    if g_is_reference:
        if traj.ref_controls is None:
            raise ValueError("trajectory carries no reference controls")
        cross = traj.cross
    else:
        # force g = h regardless of what drove the simulation
        cross = np.stack([
            a * np.sum(h * h, axis=1)
            for a, h in zip(traj.alphas, traj.controls)
        ]) if traj.n_steps else np.zeros_like(traj.quad)
    inc = traj.quad + cross + traj.mart
    return inc.sum(axis=0) - traj.terminal_loglik


def _scaled(term: ad.Tensor, scale: float) -> ad.Tensor:
    """Value-preserving gradient rescale: scale*x - (scale-1)*detach(x)."""
    if scale == 1.0:
        return term
    blocked = ad.tensor(term.data if isinstance(term, ad.Tensor) else term)
    if scale == 0.0:
        return blocked
    return ad.sub(ad.mul(term, scale), ad.mul(blocked, scale - 1.0))


def rnd_log_taped(traj: Trajectory, control_fn: Callable,
                  params: list) -> ad.Tensor:
    """Recompute rnd_log with live control evaluations at recorded states.

    States, reference controls, noises, and the terminal term enter as
    constants; gradients flow only through the fresh h evaluations. The
    trajectory's grad_scale (from subsample_gradients) rescales per-step
    gradient contributions without changing values.
    """
    if traj.ref_controls is None:
        raise ValueError("trajectory carries no reference controls")
    total = None
    for i in range(traj.n_steps):
        alpha = float(traj.alphas[i])
        k_hi = int(traj.ks[i])
        scale = 1.0 if traj.grad_scale is None else float(traj.grad_scale[i])
        if scale == 0.0:
            # recorded components equal a live recompute bit for bit, so
            # unselected steps skip the control evaluation entirely
            term = ad.tensor(traj.quad[i] + traj.cross[i] + traj.mart[i])
            total = term if total is None else ad.add(total, term)
            continue
        h = control_fn(traj.states[i], k_hi, params=params)
        if not isinstance(h, ad.Tensor):
            raise TypeError("control_fn must return a taped tensor here")
        g = traj.ref_controls[i]
        xi = traj.noises[i]
        term = _scaled(ad.add(
            ad.add(ad.mul(ad.tsum(ad.square(h), axis=1), -alpha / 2.0),
                   ad.mul(ad.tsum(ad.mul(h, g), axis=1), alpha)),
            ad.mul(ad.tsum(ad.mul(h, xi), axis=1), math.sqrt(alpha))), scale)
        total = term if total is None else ad.add(total, term)
    return ad.sub(total, traj.terminal_loglik)


def vargrad_loss(traj: Trajectory, control_fn: Callable,
                 params: list) -> ad.Tensor:
    """Unbiased sample variance of rnd_log over the batch."""
    n = traj.batch
    if n < 2:
        raise ValueError("variance loss needs batch >= 2")
    rnd = rnd_log_taped(traj, control_fn, params)
    centred = ad.sub(rnd, ad.tmean(rnd))
    return ad.div(ad.tsum(ad.square(centred)), float(n - 1))


def tb_loss(traj: Trajectory, control_fn: Callable, params: list,
            k_scalar) -> ad.Tensor:
    """Mean squared gap between rnd_log and the learnable scalar."""
    if traj.batch == 0:
        raise ValueError("empty batch")
    rnd = rnd_log_taped(traj, control_fn, params)
    return ad.tmean(ad.square(ad.sub(rnd, k_scalar)))


def subsample_gradients(traj: Trajectory, rho: float,
                        rng: np.random.Generator) -> Trajectory:
    """Enable gradients on ceil(rho K) uniformly chosen steps.

    Selected steps carry scale K/m so the expected gradient matches the
    full one; unselected steps contribute their values unchanged but no
    gradient.
    """
    if not (0.0 < rho <= 1.0):
        raise ValueError(f"subsample fraction must be in (0, 1], got {rho}")
    K = traj.n_steps
    m = math.ceil(rho * K)
    scale = np.zeros(K)
    scale[rng.choice(K, size=m, replace=False)] = K / m
    return dataclasses.replace(traj, grad_scale=scale)


def score_control_from_h(h_model: ht.HTransformModel, eps_model,
                         measurement: prb.Measurement) -> Callable:
    """Adapt a noise-space correction network to a score-space control."""
    sched = eps_model.schedule

    def fn(x, k, params=None, eps_hat=None):
        out = ht.h_forward(h_model, eps_model, x, k, measurement,
                           params=params, eps_hat=eps_hat)
        coef = -1.0 / math.sqrt(1.0 - sched.abar(k))
        if isinstance(out, ad.Tensor):
            return ad.mul(out, coef)
        return coef * out

    return fn


def train_control(h_model: ht.HTransformModel, eps_model,
                  measurement: prb.Measurement, schedule: NoiseSchedule,
                  grid: Union[TimeGrid, int], objective: ControlObjective,
                  steps: int, lr: float = 1e-3, seed: int = 0,
                  divergence_limit: float = 1e6):
    """Fit the correction network by one of the three control objectives.

    "kl" backpropagates through the taped simulation; "vargrad" and "tb"
    simulate plainly under the gradient-blocked reference and re-evaluate
    the control at recorded states, honouring objective.subsample.
    The balance scalar is a single-parameter regression against a moving
    target, so it gets a 10x learning rate of its own.
    Returns (h_model, loss curve, fitted balance scalar or None).
    """
    from .training import Adam, TrainingDivergence

    if steps < 1:
        raise ValueError("steps must be positive")
    rng = np.random.default_rng(seed)
    fn = score_control_from_h(h_model, eps_model, measurement)
    tb_k = np.array([objective.tb_k_init]) if objective.kind == "tb" else None
    opt = Adam([p.shape for p in h_model.params], lr=lr)
    opt_k = Adam([tb_k.shape], lr=10 * lr) if tb_k is not None else None
    curve: list[float] = []
    for step in range(steps):
        tape = ad.Tape()
        leaves = [tape.leaf(p) for p in h_model.params]
        if objective.kind == "kl":
            traj = simulate_controlled(eps_model, fn, schedule, grid,
                                       measurement, rng,
                                       n=objective.batch_size, params=leaves)
            loss = kl_control_loss(traj)
        else:
            traj = simulate_controlled(eps_model, fn, schedule, grid,
                                       measurement, rng,
                                       n=objective.batch_size)
            if objective.subsample < 1.0:
                traj = subsample_gradients(traj, objective.subsample, rng)
            if objective.kind == "vargrad":
                loss = vargrad_loss(traj, fn, leaves)
            else:
                k_leaf = tape.leaf(tb_k)
                loss = tb_loss(traj, fn, leaves, k_leaf)
        val = loss.item()
        if not math.isfinite(val) or abs(val) > divergence_limit:
            raise TrainingDivergence(step, val,
                                     [float(np.linalg.norm(p))
                                      for p in h_model.params])
        grads = ad.backward(loss)
        # Adam updates the arrays in place; the lists alias model storage
        opt.step(h_model.params, [grads[p] for p in leaves])
        if tb_k is not None:
            opt_k.step([tb_k], [grads[k_leaf]])
        curve.append(val)
    return h_model, curve, (float(tb_k[0]) if tb_k is not None else None)


def value_bias_probe(beta: float, horizons: Sequence[float],
                     sigma0: float = 1.4, mu0: float = 0.0,
                     n_nodes: int = 8001) -> dict:
    """Total variation between N(0,1) and the horizon-T noised target.

    For the constant-beta process the noised 1D Gaussian target
    N(mu0, sigma0^2) has mean mu0 e^{-beta T/2} and variance
    sigma0^2 e^{-beta T} + 1 - e^{-beta T}; TV is computed by quadrature
    and a log-linear slope is fitted over the usable decay range.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    horizons = np.asarray(horizons, dtype=np.float64)
    if horizons.size < 2 or np.any(horizons <= 0):
        raise ValueError("need at least two positive horizons")
    span = 12.0 * max(1.0, sigma0) + abs(mu0)
    xs = np.linspace(-span, span, n_nodes)
    dx = xs[1] - xs[0]
    tvs = np.empty(horizons.size)
    for j, T in enumerate(horizons):
        ab = math.exp(-beta * T)
        mu = mu0 * math.sqrt(ab)
        var = sigma0**2 * ab + 1.0 - ab
        pa = np.exp(-0.5 * xs**2) / math.sqrt(2 * math.pi)
        pb = np.exp(-0.5 * (xs - mu)**2 / var) / math.sqrt(2 * math.pi * var)
        trap = getattr(np, "trapezoid", None) or np.trapz
        tvs[j] = 0.5 * trap(np.abs(pa - pb), dx=dx)
    usable = (tvs > 1e-13) & (tvs < 0.25)
    slope = math.nan
    if usable.sum() >= 2:
        coef = np.polyfit(horizons[usable], np.log(tvs[usable]), 1)
        slope = -coef[0]
    return {"horizons": horizons, "tv": tvs, "slope": slope}


def trajectory_csv(traj: Trajectory) -> str:
    """Per-step batch-mean summary, one row per transition."""
    lines = ["step,k,alpha,mean_sq_control,mean_quad,mean_cross,mean_mart"]
    for i in range(traj.n_steps):
        msq = float(np.mean(np.sum(traj.controls[i]**2, axis=1)))
        lines.append(
            f"{i},{int(traj.ks[i])},{traj.alphas[i]:.10g},{msq:.10g},"
            f"{float(traj.quad[i].mean()):.10g},"
            f"{float(traj.cross[i].mean()):.10g},"
            f"{float(traj.mart[i].mean()):.10g}")
    lines.append(f"terminal,,,,,,{float(traj.terminal_loglik.mean()):.10g}")
    return "\n".join(lines) + "\n"
