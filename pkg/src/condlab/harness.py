"""Command-line experiment runner.

One JSON config file drives each command; artifacts (checkpoints, loss
curves, sample dumps, metric summaries) land in the output directory,
each stamped with the config hash and seed so any file can be traced back
to the exact run that produced it and regenerated bit for bit.

Exit codes: 0 success, 1 acceptance-criterion failure, 2 config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import control as ctl
from . import htransform as hti
from . import oracle as orc
from . import problems as prb
from . import sampling as smp
from . import training as trn
from .model import EpsilonModel
from .schedule import NoiseSchedule, build_cosine, build_linear

__all__ = ["ConfigError", "ExperimentConfig", "main", "run",
           "config_hash", "COMMANDS"]


class ConfigError(ValueError):
    """Invalid configuration; carries the offending field path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ExperimentConfig:
    """Validated view over the raw config dict.

    Sections are pulled lazily per command; every lookup failure names
    the exact field so config errors are actionable.
    """

    def __init__(self, raw: dict, path: str = "<config>"):
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        if "seed" not in raw:
            raise ConfigError("seed", "required (reproducibility is mandatory)")
        self.raw = raw
        self.path = path
        self.seed = self._int("seed", raw["seed"], minimum=0)

    @staticmethod
    def _int(field: str, value, minimum: Optional[int] = None) -> int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(field, f"expected an integer, got {value!r}")
        if minimum is not None and value < minimum:
            raise ConfigError(field, f"must be >= {minimum}, got {value}")
        return value

    @staticmethod
    def _num(field: str, value) -> float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(field, f"expected a number, got {value!r}")
        return float(value)

    def section(self, name: str, required: bool = True) -> dict:
        sec = self.raw.get(name)
        if sec is None:
            if required:
                raise ConfigError(name, "section missing")
            return {}
        if not isinstance(sec, dict):
            raise ConfigError(name, "must be a JSON object")
        return sec

    # ---- builders -------------------------------------------------------
    def schedule(self) -> NoiseSchedule:
        sec = self.section("schedule")
        kind = sec.get("kind", "linear")
        N = self._int("schedule.N", sec.get("N", 1000), minimum=1)
        try:
            if kind == "linear":
                return build_linear(self._num("schedule.beta0", sec.get("beta0", 1e-4)),
                                    self._num("schedule.betaN", sec.get("betaN", 2e-2)),
                                    N)
            if kind == "cosine":
                return build_cosine(N)
        except ValueError as e:
            raise ConfigError("schedule", str(e)) from e
        raise ConfigError("schedule.kind", f"unknown kind {kind!r}")

    def dataset(self) -> trn.ToyDataset:
        sec = self.section("dataset")
        kind = sec.get("kind")
        if kind not in trn.ToyDataset.KINDS:
            raise ConfigError("dataset.kind",
                              f"must be one of {trn.ToyDataset.KINDS}, got {kind!r}")
        n = self._int("dataset.n", sec.get("n", 0), minimum=1)
        params = sec.get("params", {})
        if not isinstance(params, dict):
            raise ConfigError("dataset.params", "must be a JSON object")
        try:
            return trn.ToyDataset(kind=kind, n=n, params=params)
        except ValueError as e:
            raise ConfigError("dataset", str(e)) from e

    def operator(self, sec: dict, field: str):
        kind = sec.get("kind")
        try:
            if kind == "mask":
                return prb.Mask(np.asarray(sec["values"], dtype=np.float64))
            if kind == "linear":
                return prb.LinearMatrix(np.asarray(sec["matrix"], dtype=np.float64))
            if kind == "clip-hdr":
                return prb.ClipHDR(self._int(field + ".dim", sec.get("dim", 0), 1),
                                   surrogate_jacobian=bool(sec.get("surrogate", False)))
        except KeyError as e:
            raise ConfigError(field, f"missing key {e}") from e
        except ValueError as e:
            raise ConfigError(field, str(e)) from e
        raise ConfigError(field + ".kind",
                          f"must be mask, linear, or clip-hdr, got {kind!r}")

    def noise(self, sec: dict, field: str) -> prb.NoiseModel:
        try:
            return prb.NoiseModel(kind=sec.get("kind", "gaussian"),
                                  sigma_y=self._num(field + ".sigma_y",
                                                    sec.get("sigma_y", 1.0)))
        except ValueError as e:
            raise ConfigError(field, str(e)) from e

    def problem(self) -> trn.ProblemSpec:
        sec = self.section("problem")
        op = None
        if "operator" in sec:
            op = self.operator(sec["operator"], "problem.operator")
        sampler = None
        samp_sec = sec.get("operator_sampler")
        if samp_sec is not None:
            if samp_sec.get("kind") != "random-mask":
                raise ConfigError("problem.operator_sampler.kind",
                                  f"only random-mask is available, got "
                                  f"{samp_sec.get('kind')!r}")
            dim = self._int("problem.operator_sampler.dim",
                            samp_sec.get("dim", 0), minimum=1)

            def sampler(rng: np.random.Generator, d=dim):
                values = (rng.uniform(size=d) < 0.5).astype(np.float64)
                return prb.Mask(values)
        noise = self.noise(sec.get("noise", {}), "problem.noise")
        amort = hti.AmortisationSpec(
            over_operator=bool(sec.get("amortise_operator", False)))
        try:
            return trn.ProblemSpec(operator=op, noise=noise,
                                   operator_sampler=sampler, amortise=amort)
        except ValueError as e:
            raise ConfigError("problem", str(e)) from e

    def base_model(self, schedule: NoiseSchedule, data_dim: int,
                   extra_inputs: int = 0) -> EpsilonModel:
        sec = self.section("base_model", required=False)
        hidden = tuple(sec.get("hidden", [64, 64]))
        try:
            return EpsilonModel(
                data_dim, schedule, hidden=hidden,
                time_dim=self._int("base_model.time_dim", sec.get("time_dim", 16), 1),
                seed=self._int("base_model.seed", sec.get("seed", 0), 0),
                zero_final=bool(sec.get("zero_final", False)),
                extra_inputs=extra_inputs)
        except ValueError as e:
            raise ConfigError("base_model", str(e)) from e

    def h_model(self, schedule: NoiseSchedule, operator,
                data_dim: int) -> hti.HTransformModel:
        sec = self.section("h_model", required=False)
        try:
            return hti.HTransformModel(
                data_dim, schedule, operator,
                hidden=tuple(sec.get("hidden", [64, 64])),
                nn2_hidden=self._int("h_model.nn2_hidden", sec.get("nn2_hidden", 16), 1),
                time_dim=self._int("h_model.time_dim", sec.get("time_dim", 16), 1),
                seed=self._int("h_model.seed", sec.get("seed", 0), 0),
                guidance_mode=sec.get("guidance_mode", "pointwise"))
        except ValueError as e:
            raise ConfigError("h_model", str(e)) from e

    def train_config(self) -> trn.TrainConfig:
        sec = self.section("training")
        try:
            return trn.TrainConfig(
                epochs=self._int("training.epochs", sec.get("epochs", 1), 0),
                batch_size=self._int("training.batch_size", sec.get("batch_size", 64), 1),
                lr=self._num("training.lr", sec.get("lr", 1e-3)),
                ema_decay=self._num("training.ema_decay", sec.get("ema_decay", 0.999)),
                seed=self._int("training.seed", sec.get("seed", self.seed), 0),
                loss_kind=sec.get("loss_kind", "eps_matching"))
        except ValueError as e:
            raise ConfigError("training", str(e)) from e

    def sampler_config(self) -> smp.SamplerConfig:
        sec = self.section("sampler")
        kind = sec.get("kind", "ddpm")
        try:
            return smp.SamplerConfig(
                steps=self._int("sampler.steps", sec.get("steps", 100), 1),
                eta=self._num("sampler.eta", sec.get("eta", 0.0)),
                gamma=self._num("sampler.gamma", sec.get("gamma", 0.0)),
                seed=self._int("sampler.seed", sec.get("seed", self.seed), 0),
                kind=kind)
        except ValueError as e:
            raise ConfigError("sampler", str(e)) from e

    def measurement(self, operator) -> prb.Measurement:
        sec = self.section("measurement")
        if "y" not in sec:
            raise ConfigError("measurement.y", "required")
        y = np.asarray(sec["y"], dtype=np.float64)
        noise = self.noise(sec.get("noise", self.section("problem", required=False)
                                   .get("noise", {})), "measurement.noise")
        return prb.Measurement(y=y, operator=operator, noise=noise)


def config_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _load_config(path: str, seed_override: Optional[int]) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as e:
        raise ConfigError("<file>", f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError("<file>", f"{path} is not valid JSON: {e}") from e
    if seed_override is not None:
        raw = dict(raw)
        raw["seed"] = seed_override
    return ExperimentConfig(raw, path)


# ---- artifact writers ---------------------------------------------------

def _stamp(cfg: ExperimentConfig) -> dict:
    return {"config_hash": config_hash(cfg.raw), "seed": cfg.seed}


def write_json(path: str, payload: dict, cfg: ExperimentConfig) -> None:
    body = dict(payload)
    body.update(_stamp(cfg))
    with open(path, "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_curve(path: str, curve: Sequence[float], cfg: ExperimentConfig) -> None:
    stamp = _stamp(cfg)
    with open(path, "w") as fh:
        fh.write(f"# config_hash={stamp['config_hash']} seed={stamp['seed']}\n")
        fh.write("step,loss\n")
        for i, v in enumerate(curve):
            fh.write(f"{i},{v:.17g}\n")


def write_samples(path: str, x0: np.ndarray, cfg: ExperimentConfig) -> None:
    stamp = _stamp(cfg)
    d = x0.shape[1]
    with open(path, "w") as fh:
        fh.write(f"# config_hash={stamp['config_hash']} seed={stamp['seed']}\n")
        fh.write(",".join(f"x{j}" for j in range(d)) + "\n")
        for row in x0:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def _schedule_spec(cfg: ExperimentConfig) -> dict:
    sec = cfg.section("schedule")
    return {"kind": sec.get("kind", "linear"), "N": sec.get("N", 1000),
            "beta0": sec.get("beta0", 1e-4), "betaN": sec.get("betaN", 2e-2)}


def _save_model_ckpt(out: str, name: str, params, cfg: ExperimentConfig,
                     kind: str, arch: dict, step: int,
                     base_hash: Optional[str] = None) -> str:
    man = {"kind": kind, "arch": arch, "step": step,
           "schedule": _schedule_spec(cfg)}
    man.update(_stamp(cfg))
    if base_hash is not None:
        man["base_hash"] = base_hash
    path = os.path.join(out, name)
    ckpt.save_checkpoint(path, params, man)
    return path


def _rebuild_base(man: dict, schedule: NoiseSchedule) -> EpsilonModel:
    arch = man["arch"]
    model = EpsilonModel(arch["data_dim"], schedule,
                         hidden=tuple(arch["hidden"]),
                         time_dim=arch["time_dim"], seed=arch["seed"],
                         zero_final=arch["zero_final"],
                         extra_inputs=arch["extra_inputs"])
    return model


def _check_schedule_match(man: dict, cfg: ExperimentConfig) -> None:
    want = _schedule_spec(cfg)
    got = man.get("schedule")
    if got != want:
        raise ConfigError("schedule",
                          f"checkpoint was built on {got}, config says {want}")


def _load_base(cfg: ExperimentConfig, schedule: NoiseSchedule) -> EpsilonModel:
    sec = cfg.section("checkpoints")
    path = sec.get("base")
    if not path:
        raise ConfigError("checkpoints.base", "required for this command")
    man, params = ckpt.load_checkpoint(path)
    if man.get("kind") != "epsilon":
        raise ConfigError("checkpoints.base",
                          f"{path} holds a {man.get('kind')!r} checkpoint")
    _check_schedule_match(man, cfg)
    model = _rebuild_base(man, schedule)
    model.params = params
    return model


# ---- commands -----------------------------------------------------------

def cmd_train_uncond(cfg: ExperimentConfig, out: str, workers: int) -> int:
    schedule = cfg.schedule()
    dataset = cfg.dataset()
    tcfg = cfg.train_config()
    model = cfg.base_model(schedule, dataset.dim)
    msec = cfg.section("base_model", required=False)
    arch = {"data_dim": dataset.dim, "hidden": list(msec.get("hidden", [64, 64])),
            "time_dim": model.embed.dim, "seed": msec.get("seed", 0),
            "zero_final": bool(msec.get("zero_final", False)),
            "extra_inputs": 0}
    model, curve, ema = trn.train_unconditional(model, dataset, tcfg)
    _save_model_ckpt(out, "base.ckpt", model.params, cfg, "epsilon", arch,
                     step=len(curve))
    if tcfg.ema_decay > 0:
        _save_model_ckpt(out, "base_ema.ckpt", ema, cfg, "epsilon", arch,
                         step=len(curve))
    write_curve(os.path.join(out, "curve.csv"), curve, cfg)
    write_json(os.path.join(out, "summary.json"),
               {"command": "train-uncond", "steps": len(curve),
                "final_loss": curve[-1] if curve else None,
                "n_params": model.n_params}, cfg)
    print(f"train-uncond: {len(curve)} steps, "
          f"final loss {curve[-1]:.6f}" if curve else "train-uncond: no steps")
    return 0


def cmd_train_correction(cfg: ExperimentConfig, out: str, workers: int) -> int:
    schedule = cfg.schedule()
    dataset = cfg.dataset()
    problem = cfg.problem()
    tcfg = cfg.train_config()
    base = _load_base(cfg, schedule)
    op = problem.operator
    if op is None:
        raise ConfigError("problem.operator",
                          "correction training needs a fixed operator")
    h = cfg.h_model(schedule, op, dataset.dim)
    frozen_pairs = bool(cfg.section("training").get("frozen_pairs", False))
    h, curve, ema = trn.train_correction(h, base, dataset, problem, tcfg,
                                   frozen_pairs=frozen_pairs)
    h_sec = cfg.section("h_model", required=False)
    arch = {"data_dim": dataset.dim, "hidden": list(h_sec.get("hidden", [64, 64])),
            "nn2_hidden": h_sec.get("nn2_hidden", 16),
            "time_dim": h_sec.get("time_dim", 16),
            "seed": h_sec.get("seed", 0),
            "guidance_mode": h_sec.get("guidance_mode", "pointwise"),
            "operator": cfg.section("problem")["operator"]}
    base_hash = ckpt.params_hash(base.params)
    _save_model_ckpt(out, "h.ckpt", h.params, cfg, "htransform", arch,
                     step=len(curve), base_hash=base_hash)
    if tcfg.ema_decay > 0:
        _save_model_ckpt(out, "h_ema.ckpt", ema, cfg, "htransform", arch,
                         step=len(curve), base_hash=base_hash)
    write_curve(os.path.join(out, "curve.csv"), curve, cfg)
    write_json(os.path.join(out, "summary.json"),
               {"command": "train-correction", "steps": len(curve),
                "final_loss": curve[-1] if curve else None,
                "param_budget_fraction": h.param_budget_fraction(base)}, cfg)
    print(f"train-correction: {len(curve)} steps, final loss "
          f"{curve[-1]:.6f}, budget {h.param_budget_fraction(base):.3f}"
          if curve else "train-correction: no steps")
    return 0


def cmd_train_amortised(cfg: ExperimentConfig, out: str, workers: int) -> int:
    schedule = cfg.schedule()
    dataset = cfg.dataset()
    problem = cfg.problem()
    tcfg = cfg.train_config()
    style = cfg.section("training").get("style", "features")
    if style == "rfdiff":
        extra = 3 * dataset.dim
    elif style == "features":
        op = problem.operator or problem.draw_operator(np.random.default_rng(0))
        extra = hti.feature_width(op)
    else:
        raise ConfigError("training.style",
                          f"must be features or rfdiff, got {style!r}")
    model = cfg.base_model(schedule, dataset.dim, extra_inputs=extra)
    model, curve, ema = trn.train_amortised(model, dataset, problem, tcfg,
                                            style=style)
    sec = cfg.section("base_model", required=False)
    arch = {"data_dim": dataset.dim, "hidden": list(sec.get("hidden", [64, 64])),
            "time_dim": sec.get("time_dim", 16), "seed": sec.get("seed", 0),
            "zero_final": bool(sec.get("zero_final", False)),
            "extra_inputs": extra}
    _save_model_ckpt(out, "amortised.ckpt", model.params, cfg, "epsilon",
                     arch, step=len(curve))
    if tcfg.ema_decay > 0:
        _save_model_ckpt(out, "amortised_ema.ckpt", ema, cfg, "epsilon",
                         arch, step=len(curve))
    write_curve(os.path.join(out, "curve.csv"), curve, cfg)
    write_json(os.path.join(out, "summary.json"),
               {"command": "train-amortised", "style": style,
                "steps": len(curve),
                "final_loss": curve[-1] if curve else None}, cfg)
    print(f"train-amortised[{style}]: {len(curve)} steps, final loss "
          f"{curve[-1]:.6f}" if curve else "train-amortised: no steps")
    return 0


def cmd_train_control(cfg: ExperimentConfig, out: str, workers: int) -> int:
    schedule = cfg.schedule()
    sec = cfg.section("control")
    base_sec = sec.get("base", {})
    if base_sec.get("kind", "exact-gaussian") == "exact-gaussian":
        m = np.asarray(base_sec.get("mean", [0.0]), dtype=np.float64)
        s = np.asarray(base_sec.get("std", [1.0]), dtype=np.float64)
        base = orc.BayesOptimalEps(m, s, schedule)
    else:
        base = _load_base(cfg, schedule)
    op = cfg.operator(sec.get("operator", {"kind": "linear",
                                           "matrix": [[1.0]]}),
                      "control.operator")
    noise = cfg.noise(sec.get("noise", {}), "control.noise")
    if "y" not in sec:
        raise ConfigError("control.y", "required")
    meas = prb.Measurement(y=np.asarray(sec["y"], dtype=np.float64),
                           operator=op, noise=noise)
    h = cfg.h_model(schedule, op, base.data_dim)
    hti.disable_guidance_skip(h)
    try:
        objective = ctl.ControlObjective(
            kind=sec.get("objective", "kl"),
            batch_size=cfg._int("control.batch_size", sec.get("batch_size", 64), 1),
            subsample=cfg._num("control.subsample", sec.get("subsample", 1.0)),
            tb_k_init=cfg._num("control.tb_k_init", sec.get("tb_k_init", 0.0)))
    except ValueError as e:
        raise ConfigError("control", str(e)) from e
    steps = cfg._int("control.steps", sec.get("steps", 100), 1)
    grid = cfg._int("control.grid", sec.get("grid", 32), 1)
    lr = cfg._num("control.lr", sec.get("lr", 5e-3))
    h, curve, tb_k = ctl.train_control(h, base, meas, schedule, grid,
                                       objective, steps=steps, lr=lr,
                                       seed=cfg.seed)
    h_sec = cfg.section("h_model", required=False)
    arch = {"data_dim": base.data_dim,
            "hidden": list(h_sec.get("hidden", [64, 64])),
            "nn2_hidden": h_sec.get("nn2_hidden", 16),
            "time_dim": h_sec.get("time_dim", 16), "seed": h_sec.get("seed", 0),
            "guidance_mode": h_sec.get("guidance_mode", "pointwise"),
            "operator": sec.get("operator", {"kind": "linear", "matrix": [[1.0]]})}
    _save_model_ckpt(out, "control_h.ckpt", h.params, cfg, "htransform",
                     arch, step=len(curve),
                     base_hash=ckpt.params_hash(base.params))
    write_curve(os.path.join(out, "curve.csv"), curve, cfg)
    write_json(os.path.join(out, "summary.json"),
               {"command": "train-control", "objective": objective.kind,
                "steps": len(curve), "final_loss": curve[-1],
                "tb_scalar": tb_k}, cfg)
    print(f"train-control[{objective.kind}]: {len(curve)} steps, "
          f"final loss {curve[-1]:.6f}")
    return 0


def cmd_sample(cfg: ExperimentConfig, out: str, workers: int) -> int:
    schedule = cfg.schedule()
    scfg = cfg.sampler_config()
    n = cfg._int("sampler.n", cfg.section("sampler").get("n", 1000), 1)
    base = _load_base(cfg, schedule)

    if scfg.kind == "ddpm":
        batch = smp.sample_ddpm(base, schedule, scfg, n)
    else:
        problem_sec = cfg.section("problem", required=False)
        if not problem_sec:
            raise ConfigError("problem", "section required for guided sampling")
        op = cfg.operator(problem_sec["operator"], "problem.operator")
        meas = cfg.measurement(op)
        if scfg.kind == "ddim":
            h = None
            h_path = cfg.section("checkpoints").get("h")
            if h_path:
                man, params = ckpt.load_checkpoint(h_path)
                if man.get("kind") != "htransform":
                    raise ConfigError("checkpoints.h",
                                      f"{h_path} holds {man.get('kind')!r}")
                ckpt.require_base_match(man, base.params, h_path)
                arch = man["arch"]
                h = hti.HTransformModel(
                    arch["data_dim"], schedule,
                    cfg.operator(arch["operator"], "checkpoint.operator"),
                    hidden=tuple(arch["hidden"]), nn2_hidden=arch["nn2_hidden"],
                    time_dim=arch["time_dim"], seed=arch["seed"],
                    guidance_mode=arch["guidance_mode"])
                h.params = params
            batch = smp.sample_guided_ddim(base, h, schedule, scfg, meas, n)
        elif scfg.kind == "dps":
            batch = smp.sample_dps(base, schedule, scfg, meas, n)
        elif scfg.kind == "replacement":
            if not isinstance(meas.operator, prb.Mask):
                raise ConfigError("problem.operator",
                                  "replacement sampling needs a mask operator")
            if base.extra_inputs:
                raise ConfigError("checkpoints.base",
                                  "replacement sampling needs an unconditional "
                                  "base, this checkpoint takes conditioning "
                                  "features")
            values = np.asarray(cfg.section("measurement").get("values", []),
                                dtype=np.float64)
            if values.size != base.data_dim:
                raise ConfigError("measurement.values",
                                  f"need {base.data_dim} known coordinates")
            batch = smp.sample_replacement(base, schedule, scfg, meas.operator,
                                           values, n)
        elif scfg.kind == "rfdiff":
            if not isinstance(op, prb.Mask):
                raise ConfigError("problem.operator",
                                  "partial-coordinate conditioning needs a mask")
            if base.extra_inputs != 3 * base.data_dim:
                raise ConfigError("checkpoints.base",
                                  "this sampler needs a base trained with "
                                  "style=rfdiff (3*dim conditioning features)")
            values = np.asarray(cfg.section("measurement").get("values", []),
                                dtype=np.float64)
            if values.size != base.data_dim:
                raise ConfigError("measurement.values",
                                  f"need {base.data_dim} known coordinates")
            batch = smp.sample_rfdiff_style(base, schedule, scfg, op, values, n)
        else:
            raise ConfigError("sampler.kind", f"unknown kind {scfg.kind!r}")

    write_samples(os.path.join(out, "samples.csv"), batch.x0, cfg)
    write_json(os.path.join(out, "summary.json"),
               {"command": "sample", "kind": scfg.kind, "n": int(n),
                "mean": batch.x0.mean(axis=0).tolist(),
                "std": batch.x0.std(axis=0).tolist()}, cfg)
    print(f"sample[{scfg.kind}]: {n} draws -> samples.csv")
    return 0


def cmd_oracle_check(cfg: ExperimentConfig, out: str, workers: int) -> int:
    """Quick analytic-vs-numerical cross-checks; prints one line each."""
    results = {}

    sched = build_linear(1e-4, 2e-2, 200)
    chain = orc.LinearGaussianChain(m=np.zeros(1), S=np.eye(1), A=np.eye(1),
                                    sigma_y=0.5, schedule=sched)
    y = np.array([0.8])

    ax = np.linspace(-6, 6, 481)
    prior = orc.GridDensity(axes=(ax,),
                            log_values=-0.5 * ax**2 - 0.5 * np.log(2 * np.pi),
                            cell_volume=float(ax[1] - ax[0]))
    gh = orc.grid_h_transform(
        prior, lambda pts, yy: -0.5 * ((pts[:, 0] - yy[0]) / 0.5) ** 2
        - 0.5 * np.log(2 * np.pi * 0.25), sched, 60, y)
    xs = np.linspace(-2, 2, 21)[:, None]
    want = orc.lg_h_star(chain, xs, 60, y)[:, 0]
    got = np.array([gh.grad_at(x) for x in xs])[:, 0]
    results["grid_vs_analytic_guidance"] = float(np.max(np.abs(got - want)))

    tn = orc.truncated_normal_h(np.array([0.3]), np.array([0.8]), -0.5, 1.1)
    nodes = np.linspace(-0.5, 1.1, 20001)
    dens = (np.exp(-0.5 * ((nodes - 0.3) / 0.8) ** 2)
            / np.sqrt(2 * np.pi * 0.64))
    # composite Simpson: trapezoid error is larger than the agreement target
    w = np.ones(nodes.size)
    w[1:-1:2], w[2:-1:2] = 4.0, 2.0
    quad = float(nodes[1] - nodes[0]) / 3.0 * float(np.sum(w * dens))
    results["truncnorm_vs_quadrature"] = float(abs(np.exp(tn.log_h[0]) - quad))

    mu_p, S_p, evid = orc.lg_posterior(chain, y)
    rng = np.random.default_rng(0)
    xs_mc = rng.normal(size=(200000, 1))
    w = np.exp(-0.5 * ((xs_mc[:, 0] - y[0]) / 0.5) ** 2)
    mc_mean = float(np.sum(w * xs_mc[:, 0]) / np.sum(w))
    results["posterior_mean_vs_importance"] = float(abs(mc_mean - mu_p[0]))

    a = rng.normal(size=(4000, 2))
    m = orc.distribution_metrics(a, a.copy(), seed=1)
    results["metric_self_distance"] = float(m["sliced_wasserstein"])

    checks = [
        ("grid_vs_analytic_guidance", results["grid_vs_analytic_guidance"] < 1e-4),
        ("truncnorm_vs_quadrature", results["truncnorm_vs_quadrature"] < 1e-10),
        ("posterior_mean_vs_importance", results["posterior_mean_vs_importance"] < 0.02),
        ("metric_self_distance", results["metric_self_distance"] < 1e-12),
    ]
    ok = True
    for name, passed in checks:
        print(f"oracle-check {name}: {'PASS' if passed else 'FAIL'} "
              f"({results[name]:.3g})")
        ok = ok and passed
    write_json(os.path.join(out, "oracle_check.json"),
               {"command": "oracle-check", "results": results,
                "passed": ok}, cfg)
    return 0 if ok else 1


def cmd_accept(cfg: ExperimentConfig, out: str, workers: int) -> int:
    from . import acceptance
    report = acceptance.run_all(verbose=True)
    write_json(os.path.join(out, "acceptance.json"),
               {"command": "accept",
                "criteria": [r.as_dict() for r in report]}, cfg)
    return 0 if all(r.passed for r in report) else 1


COMMANDS = {
    "train-uncond": cmd_train_uncond,
    "train-correction": cmd_train_correction,
    "train-amortised": cmd_train_amortised,
    "train-control": cmd_train_control,
    "sample": cmd_sample,
    "oracle-check": cmd_oracle_check,
    "accept": cmd_accept,
}

_DEFAULT_ACCEPT_CONFIG = {"seed": 0}


def run(command: str, config_path: Optional[str], seed: Optional[int] = None,
        out: Optional[str] = None, workers: int = 1) -> int:
    if command not in COMMANDS:
        raise ConfigError("<command>", f"unknown command {command!r}")
    if workers < 1:
        raise ConfigError("--workers", "must be >= 1")
    if config_path is None:
        if command not in ("accept", "oracle-check"):
            raise ConfigError("--config", "required for this command")
        raw = dict(_DEFAULT_ACCEPT_CONFIG)
        if seed is not None:
            raw["seed"] = seed
        cfg = ExperimentConfig(raw, "<built-in>")
    else:
        cfg = _load_config(config_path, seed)
    out_dir = out or cfg.raw.get("out") or "."
    os.makedirs(out_dir, exist_ok=True)
    return COMMANDS[command](cfg, out_dir, workers)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="condlab",
        description="Conditional-diffusion laboratory experiment runner")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None,
                        help="JSON experiment config (optional for "
                             "accept/oracle-check)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--out", default=None,
                        help="output directory (default: config 'out' or .)")
    parser.add_argument("--workers", type=int, default=1,
                        help="worker count; execution is sequential and "
                             "results are worker-count independent")
    args = parser.parse_args(argv)
    try:
        return run(args.command, args.config, args.seed, args.out, args.workers)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except ckpt.CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
