"""Training loops: unconditional noise-prediction, correction-network
fine-tuning against a frozen base, and from-scratch conditional training.

Every loop is a pure function of (initial parameters, dataset, seed,
config): reruns are bit-identical. Divergence (non-finite or huge loss)
aborts with a state dump instead of silently continuing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import htransform as ht
from . import problems as prb
from .model import EpsilonModel
from .schedule import forward_sample

__all__ = ["TrainConfig", "ToyDataset", "ProblemSpec", "TrainingDivergence",
           "Adam", "train_unconditional", "train_correction", "train_amortised",
           "rfdiff_loss"]


class TrainingDivergence(RuntimeError):
    """Raised when the loss goes non-finite or explodes; carries a dump."""

    def __init__(self, step: int, loss: float, param_norms: list[float]):
        self.step = step
        self.loss = loss
        self.param_norms = param_norms
        super().__init__(
            f"training diverged at step {step}: loss = {loss!r}, "
            f"param norms = {[round(v, 3) for v in param_norms]}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 64
    lr: float = 1e-3
    ema_decay: float = 0.999
    seed: int = 0
    loss_kind: str = "eps_matching"
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1, lr > 0 required")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ValueError("ema_decay must be in [0, 1)")


@dataclass(frozen=True)
class ToyDataset:
    """Synthetic data specs; `generate` materialises the training set."""

    kind: str
    n: int
    params: dict = field(default_factory=dict)

    KINDS = ("gaussian1d", "gaussian_nd", "gmm2d", "checkerboard2d")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.n < 1:
            raise ValueError("dataset size must be positive")
        if self.kind == "gmm2d":
            w = np.asarray(self.params.get("weights", []), dtype=np.float64)
            if w.size and abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("mixture weights must sum to 1")

    @property
    def dim(self) -> int:
        if self.kind == "gaussian1d":
            return 1
        if self.kind == "gaussian_nd":
            return len(np.atleast_1d(self.params["mean"]))
        return 2

    def generate(self, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "gaussian1d":
            m = float(self.params.get("mean", 0.0))
            s = float(self.params.get("std", 1.0))
            return rng.normal(m, s, size=(self.n, 1))
        if self.kind == "gaussian_nd":
            m = np.atleast_1d(np.asarray(self.params["mean"], dtype=np.float64))
            cov = np.asarray(self.params["cov"], dtype=np.float64)
            np.linalg.cholesky(cov)
            return rng.multivariate_normal(m, cov, size=self.n)
        if self.kind == "gmm2d":
            means = np.asarray(self.params["means"], dtype=np.float64)
            covs = np.asarray(self.params["covs"], dtype=np.float64)
            weights = np.asarray(self.params["weights"], dtype=np.float64)
            comp = rng.choice(len(weights), size=self.n, p=weights)
            out = np.empty((self.n, 2))
            for c in range(len(weights)):
                sel = comp == c
                cnt = int(sel.sum())
                if cnt:
                    out[sel] = rng.multivariate_normal(means[c], covs[c], size=cnt)
            return out
        # checkerboard: unit cells of alternating parity on [-2, 2)^2
        i = rng.integers(-2, 2, size=self.n)
        j2 = rng.integers(0, 2, size=self.n)
        j = 2 * j2 - 2 + ((i % 2) == 0)
        u = rng.uniform(0, 1, size=(self.n, 2))
        return np.stack([i + u[:, 0], j + u[:, 1]], axis=1)


@dataclass(frozen=True)
class ProblemSpec:
    """Conditioning task: operator (fixed or sampled per example) + noise."""

    operator: object = None
    noise: prb.NoiseModel = field(default_factory=prb.NoiseModel)
    operator_sampler: Optional[Callable] = None
    amortise: ht.AmortisationSpec = field(default_factory=ht.AmortisationSpec)

    def __post_init__(self):
        if self.operator is None and self.operator_sampler is None:
            raise ValueError("need an operator or an operator sampler")
        if self.amortise.over_operator and self.operator_sampler is None:
            raise ValueError("operator amortisation needs an operator sampler")

    def draw_operator(self, rng: np.random.Generator):
        if self.amortise.over_operator:
            return self.operator_sampler(rng)
        return self.operator


class Adam:
    """Adaptive-moment optimiser with bias correction."""

    def __init__(self, shapes: Sequence[tuple], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _check_divergence(value: float, step: int, params, limit: float) -> None:
    if not math.isfinite(value) or value > limit:
        norms = [float(np.linalg.norm(p)) for p in params]
        raise TrainingDivergence(step, value, norms)


def _ema_update(ema: list[np.ndarray], params: list[np.ndarray], decay: float):
    for e, p in zip(ema, params):
        e *= decay
        e += (1 - decay) * p


def train_unconditional(model: EpsilonModel, dataset: ToyDataset,
                        cfg: TrainConfig):
    """Noise-matching training of the base model. Returns (model, curve, ema).

    The model's parameters are updated in place; `ema` is the exponential
    moving average snapshot (equal to the raw parameters when decay = 0).
    """
    rng = np.random.default_rng(cfg.seed)
    data = dataset.generate(rng)
    if data.shape[1] != model.data_dim:
        raise ValueError(
            f"dataset dim {data.shape[1]} != model dim {model.data_dim}")
    sched = model.schedule
    opt = Adam([p.shape for p in model.params], lr=cfg.lr)
    ema = [p.copy() for p in model.params]
    curve: list[float] = []
    step = 0
    for _ in range(cfg.epochs):
        for idx in _epoch_batches(data.shape[0], cfg.batch_size, rng):
            x0 = data[idx]
            ks = rng.integers(1, sched.N + 1, size=x0.shape[0])
            eps = rng.normal(size=x0.shape)
            x_t = forward_sample(sched, x0, ks, eps)

            tape = ad.Tape()
            leaves = [tape.leaf(p) for p in model.params]
            pred = model.forward(x_t, ks, params=leaves)
            loss = ad.tmean(ad.square(ad.sub(pred, eps)))
            value = float(loss.data)
            _check_divergence(value, step, model.params, cfg.divergence_limit)
            curve.append(value)

            grads = ad.backward(loss)
            opt.step(model.params, [grads[l] for l in leaves])
            _ema_update(ema, model.params, cfg.ema_decay)
            step += 1
    return model, curve, ema


def _measurements_for(problem: ProblemSpec, x0: np.ndarray,
                      rng: np.random.Generator) -> list[prb.Measurement]:
    return [
        prb.sample_measurement(problem.draw_operator(rng), problem.noise,
                               x0[i], rng)
        for i in range(x0.shape[0])
    ]


def train_correction(h: ht.HTransformModel, eps_model: EpsilonModel,
                     dataset: ToyDataset, problem: ProblemSpec,
                     cfg: TrainConfig, frozen_pairs: bool = False):
    """Fine-tune the correction network against the frozen base.

    Measurements are simulated fresh per example per step by default;
    frozen_pairs instead fixes one measurement per dataset example up
    front (the small-paired-dataset regime used in size ablations).
    """
    rng = np.random.default_rng(cfg.seed)
    data = dataset.generate(rng)
    base_snapshot = [p.copy() for p in eps_model.params]
    fixed: Optional[list[prb.Measurement]] = None
    if frozen_pairs:
        fixed = _measurements_for(problem, data, rng)

    opt = Adam([p.shape for p in h.params], lr=cfg.lr)
    ema = [p.copy() for p in h.params]
    curve: list[float] = []
    step = 0
    for _ in range(cfg.epochs):
        for idx in _epoch_batches(data.shape[0], cfg.batch_size, rng):
            x0 = data[idx]
            if fixed is not None:
                ms = [fixed[i] for i in idx]
            else:
                ms = _measurements_for(problem, x0, rng)

            tape = ad.Tape()
            leaves = [tape.leaf(p) for p in h.params]
            loss = ht.correction_loss(h, eps_model, x0, ms, rng, params=leaves)
            value = float(loss.data)
            _check_divergence(value, step, h.params, cfg.divergence_limit)
            curve.append(value)

            grads = ad.backward(loss)
            opt.step(h.params, [grads[l] for l in leaves])
            _ema_update(ema, h.params, cfg.ema_decay)
            step += 1

    for p, q in zip(eps_model.params, base_snapshot):
        if not np.array_equal(p, q):
            raise AssertionError("frozen base drifted during fine-tuning")
    return h, curve, ema


def rfdiff_loss(model: EpsilonModel, x0_batch: np.ndarray,
                masks: np.ndarray, rng: np.random.Generator,
                params: Optional[list] = None):
    """Noise matching with the known block held clean at its own time 0.

    The network input keeps the known coordinates at their clean values;
    the conditioning row is [known block, mask, per-coordinate time
    fraction]; the loss is averaged over the unknown coordinates only.
    """
    x0 = np.atleast_2d(np.asarray(x0_batch, dtype=np.float64))
    m = np.atleast_2d(np.asarray(masks, dtype=np.float64))
    if m.shape != x0.shape:
        raise ValueError(f"mask block {m.shape} != data block {x0.shape}")
    w = 1.0 - m
    if w.sum() == 0:
        raise ValueError("every coordinate is observed; nothing to train on")
    sched = model.schedule
    B = x0.shape[0]
    ks = rng.integers(1, sched.N + 1, size=B)
    eps = rng.normal(size=x0.shape)
    x_t = forward_sample(sched, x0, ks, eps)
    x_in = x_t * w + x0 * m
    tfrac = (ks[:, None] / sched.N) * w
    cond = np.concatenate([x0 * m, m, tfrac], axis=1)
    pred = model.forward(x_in, ks, params=params, cond=cond)
    sq = ad.square(ad.sub(pred, eps))
    return ad.div(ad.tsum(ad.mul(sq, w)), float(w.sum()))


def train_amortised(model: EpsilonModel, dataset: ToyDataset,
                    problem: ProblemSpec, cfg: TrainConfig,
                    style: str = "features"):
    """From-scratch conditional training.

    style "features" feeds measurement features next to the state;
    style "rfdiff" instead pins the known block clean in the input and
    carries a per-coordinate time channel, with the loss restricted to
    the unknown coordinates.
    """
    if style not in ("features", "rfdiff"):
        raise ValueError(f"unknown amortised training style {style!r}")
    rng = np.random.default_rng(cfg.seed)
    data = dataset.generate(rng)
    if style == "rfdiff" and model.extra_inputs != 3 * model.data_dim:
        raise ValueError(
            "rfdiff style needs the per-coordinate time input block "
            f"(conditioning width {3 * model.data_dim}, "
            f"got {model.extra_inputs})")
    opt = Adam([p.shape for p in model.params], lr=cfg.lr)
    ema = [p.copy() for p in model.params]
    curve: list[float] = []
    step = 0
    for _ in range(cfg.epochs):
        for idx in _epoch_batches(data.shape[0], cfg.batch_size, rng):
            x0 = data[idx]

            tape = ad.Tape()
            leaves = [tape.leaf(p) for p in model.params]
            if style == "rfdiff":
                ops = [problem.draw_operator(rng) for _ in range(x0.shape[0])]
                for op in ops:
                    if not isinstance(op, prb.Mask):
                        raise TypeError("rfdiff style needs mask operators")
                masks = np.stack([op.mask for op in ops])
                loss = rfdiff_loss(model, x0, masks, rng, params=leaves)
            else:
                ms = _measurements_for(problem, x0, rng)
                loss = ht.amortised_score_loss(model, x0, ms, rng,
                                               params=leaves)
            value = float(loss.data)
            _check_divergence(value, step, model.params, cfg.divergence_limit)
            curve.append(value)

            grads = ad.backward(loss)
            opt.step(model.params, [grads[l] for l in leaves])
            _ema_update(ema, model.params, cfg.ema_decay)
            step += 1
    return model, curve, ema
