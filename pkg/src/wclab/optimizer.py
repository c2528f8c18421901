"""Full-batch gradient descent with early stopping and paired resampled runs."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import risk
from .model import ThreeLayerParams, TwoLayerParams, flatten, unflatten


class DivergenceError(RuntimeError):
    """Risk became non-finite or blew up; ``step`` is where it happened."""

    def __init__(self, step: int, value: float):
        super().__init__(f"gradient descent diverged at step {step} (risk={value!r})")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class Schedule:
    """Step-size rule: ``constant`` uses ``eta``; ``polylog`` uses
    ``eta_s = (s + 1) ** -alpha / log(horizon)``."""

    kind: str = "constant"
    eta: float | None = None
    alpha: float | None = None
    horizon: int | None = None

    def __post_init__(self):
        if self.kind == "constant":
            if self.eta is None or not math.isfinite(self.eta) or self.eta < 0:
                raise ValueError("constant schedule needs a finite eta >= 0")
        elif self.kind == "polylog":
            if self.alpha is None or not 0 < self.alpha:
                raise ValueError("polylog schedule needs alpha > 0")
            if self.horizon is None or self.horizon < 3:
                raise ValueError("polylog schedule needs horizon >= 3 so that log(horizon) > 1")
        else:
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def constant(cls, eta: float) -> "Schedule":
        return cls("constant", eta=float(eta))

    @classmethod
    def polylog(cls, alpha: float, horizon: int) -> "Schedule":
        return cls("polylog", alpha=float(alpha), horizon=int(horizon))

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def step_sizes(schedule: Schedule, t: int) -> np.ndarray:
    """``eta_0, ..., eta_{t-1}``."""
    if t < 1:
        raise ValueError("t must be >= 1")
    if schedule.kind == "constant":
        return np.full(t, float(schedule.eta))
    s = np.arange(t, dtype=float)
    return (s + 1.0) ** (-schedule.alpha) / math.log(schedule.horizon)


INIT_KINDS = ("first_layer_zero_second_gaussian", "custom")


@dataclass(frozen=True)
class GDConfig:
    schedule: Schedule
    t_max: int
    M: int = 16
    c: float = 0.5
    train_second_layer: bool = True
    seed: int = 0
    init: str = "first_layer_zero_second_gaussian"
    init_params: TwoLayerParams | ThreeLayerParams | None = None
    v_scale: float = 1.0
    early_stopping: bool = False
    eval_every: int = 500
    patience: int = 5
    record_stride: int = 0

    def __post_init__(self):
        if self.t_max < 0:
            raise ValueError("t_max must be >= 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.init not in INIT_KINDS:
            raise ValueError(f"init must be one of {INIT_KINDS}")
        if self.init == "custom" and self.init_params is None:
            raise ValueError("custom init needs init_params")
        if self.record_stride < 0:
            raise ValueError("record_stride must be >= 0")


def initial_params(config: GDConfig, d: int):
    """First layer at zero, second layer i.i.d. Gaussian (or the custom point)."""
    if config.init == "custom":
        return config.init_params
    rng = np.random.default_rng(config.seed)
    v = config.v_scale * rng.standard_normal(config.M)
    return TwoLayerParams(np.zeros((config.M, d)), v, config.c, config.train_second_layer)


def _v_inf(params) -> float:
    return float(np.max(np.abs(params.v)))


@dataclass
class Trajectory:
    steps_run: int = 0
    etas: list = field(default_factory=list)
    R_series: list = field(default_factory=list)
    grad_norm_series: list = field(default_factory=list)
    dist_from_init_series: list = field(default_factory=list)
    v_inf_series: list = field(default_factory=list)
    testR_series: list = field(default_factory=list)  # (step, value)
    snapshots: list = field(default_factory=list)  # (step, params)
    stop_reason: str = "max_iters"

    @property
    def final_params(self):
        return self.snapshots[-1][1]

    @property
    def initial_params(self):
        return self.snapshots[0][1]

    def best_test(self):
        """``(step, risk)`` at the lowest evaluated test risk, or ``None``."""
        if not self.testR_series:
            return None
        return min(self.testR_series, key=lambda sr: (sr[1], sr[0]))

    def snapshot_at(self, step: int):
        for s, p in self.snapshots:
            if s == step:
                return p
        raise KeyError(f"no snapshot at step {step}")

    def to_rows(self):
        test = dict(self.testR_series)
        for s in range(self.steps_run + 1):
            yield {
                "step": s,
                "R": self.R_series[s],
                "testR": test.get(s, ""),
                "grad_norm": self.grad_norm_series[s],
                "dist_init": self.dist_from_init_series[s],
                "v_inf": self.v_inf_series[s],
            }

    def to_csv(self, path):
        cols = ["step", "R", "testR", "grad_norm", "dist_init", "v_inf"]
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for row in self.to_rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

    def summary(self, config: GDConfig | None = None) -> dict:
        best = self.best_test()
        out = {
            "steps_run": self.steps_run,
            "stop_reason": self.stop_reason,
            "final_R": self.R_series[-1],
            "best_test": None if best is None else {"step": best[0], "risk": best[1]},
        }
        if config is not None:
            out["config"] = config_echo(config)
        return out

    def to_json(self, path, config: GDConfig | None = None):
        Path(path).write_text(json.dumps(self.summary(config), indent=2, sort_keys=True))


def config_echo(config: GDConfig) -> dict:
    out = {k: getattr(config, k) for k in config.__dataclass_fields__ if k not in ("schedule", "init_params")}
    out["schedule"] = config.schedule.to_dict()
    return out


def _should_record(step, stride, last):
    return step == 0 or last or (stride > 0 and step % stride == 0)


def _run(ctx, ctx_test, config: GDConfig, correction=None):
    params = initial_params(config, ctx.dataset.d)
    w0 = flatten(params)
    w = w0.copy()
    T = config.t_max
    etas = step_sizes(config.schedule, T) if T > 0 else np.zeros(0)
    traj = Trajectory()
    R0 = None
    prev_test, increases = None, 0
    stride = config.record_stride
    s = 0
    fused = risk.FusedTwoLayer(ctx, params) if risk.FusedTwoLayer.supports(ctx, params) else None
    while True:
        if fused is not None:
            R, g = fused.value_and_grad(params)
        else:
            R, g = risk.value_and_grad(ctx, params)
        if correction is not None:
            dR, dg = correction(params)
            R, g = R + dR, g + dg
        if R0 is None:
            R0 = R
        if not math.isfinite(R) or R > 1e6 * max(R0, 1e-300) or not np.all(np.isfinite(g)):
            raise DivergenceError(s, R)
        traj.R_series.append(R)
        traj.grad_norm_series.append(float(np.linalg.norm(g)))
        traj.dist_from_init_series.append(float(np.linalg.norm(w - w0)))
        traj.v_inf_series.append(_v_inf(params))
        stop = s >= T
        if config.early_stopping and ctx_test is not None and s % config.eval_every == 0:
            tr = risk.population_risk_estimate(ctx_test, params)
            traj.testR_series.append((s, tr))
            increases = increases + 1 if prev_test is not None and tr > prev_test else 0
            prev_test = tr
            if increases >= config.patience:
                traj.stop_reason = "early_stop"
                stop = True
        if _should_record(s, stride, stop):
            traj.snapshots.append((s, params))
        if stop:
            break
        eta = float(etas[s])
        traj.etas.append(eta)
        w = w - eta * g
        params = unflatten(w, params)
        s += 1
    traj.steps_run = s
    return traj


def run_gd(ctx_train, ctx_test=None, config: GDConfig | None = None) -> Trajectory:
    """Run ``w_{s+1} = w_s - eta_s grad R(w_s)`` from the configured start.

    With ``early_stopping`` the held-out risk is evaluated every ``eval_every``
    steps, and the run stops once it has risen strictly ``patience`` times in
    a row.
    """
    if config is None:
        raise ValueError("config is required")
    if config.early_stopping and ctx_test is None:
        raise ValueError("early stopping needs a test context")
    return _run(ctx_train, ctx_test, config)


def run_resampled(ctx_train, config: GDConfig, i: int, z_prime) -> Trajectory:
    """GD on the risk with sample ``i`` replaced by ``z_prime``.

    Value and gradient use the identity
    ``R^(i) = R + (l(w, z') - l(w, Z_i)) / N`` on top of the same kernel as
    :func:`run_gd`, so ``z_prime == Z_i`` reproduces the base run exactly.
    """
    if not 0 <= i < ctx_train.N:
        raise IndexError(f"sample index {i} outside [0, {ctx_train.N})")
    x_new, y_new = z_prime
    x_old, y_old = ctx_train.X[i], ctx_train.y[i]
    N = ctx_train.N

    def correction(params):
        dR = (risk.point_loss(ctx_train, params, x_new, y_new) - risk.point_loss(ctx_train, params, x_old, y_old)) / N
        dg = (risk.point_grad(ctx_train, params, x_new, y_new) - risk.point_grad(ctx_train, params, x_old, y_old)) / N
        return dR, dg

    return _run(ctx_train, None, _no_early_stop(config), correction=correction)


def _no_early_stop(config: GDConfig) -> GDConfig:
    if not config.early_stopping:
        return config
    fields = {k: getattr(config, k) for k in config.__dataclass_fields__}
    fields["early_stopping"] = False
    return GDConfig(**fields)


@dataclass
class PairedResult:
    traj: Trajectory
    traj_i: Trajectory
    deviation_series: np.ndarray


def deviations(traj: Trajectory, traj_i: Trajectory) -> np.ndarray:
    """``||w_s - w_s^(i)||`` at every step both runs recorded."""
    other = dict(traj_i.snapshots)
    out = []
    for s, p in traj.snapshots:
        if s in other:
            out.append(float(np.linalg.norm(flatten(p) - flatten(other[s]))))
    return np.array(out)


def run_paired(ctx_train, config: GDConfig, i: int, z_prime) -> PairedResult:
    """Two GD runs from the same start: one on R, one with sample ``i`` resampled.

    Every iterate of both runs is kept so the deviation series is complete.
    """
    fields = {k: getattr(config, k) for k in config.__dataclass_fields__}
    fields.update(record_stride=1, early_stopping=False)
    cfg = GDConfig(**fields)
    base = _run(ctx_train, None, cfg)
    other = run_resampled(ctx_train, cfg, i, z_prime)
    return PairedResult(base, other, deviations(base, other))
