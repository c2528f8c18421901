"""Composite experiments: stability runs, inequality suites, sweeps, constructions."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import bounds, risk, spectral
from .data import Dataset, TeacherSpec, empirical_covariance, synth_teacher
from .model import TwoLayerParams, flatten
from .optimizer import DivergenceError, GDConfig, Schedule, run_gd, run_resampled

MARGIN_TOL = 1e-9


def _map(fn, items, threads):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- margins

@dataclass
class MarginReport:
    name: str
    margins: np.ndarray
    tol: float = MARGIN_TOL
    details: dict = field(default_factory=dict)

    @property
    def min_margin(self) -> float:
        return float(np.min(self.margins)) if self.margins.size else math.inf

    @property
    def worst_index(self) -> int:
        return int(np.argmin(self.margins)) if self.margins.size else -1

    @property
    def violations(self) -> int:
        return int(np.sum(self.margins < -self.tol))

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def to_dict(self):
        return {"name": self.name, "count": int(self.margins.size), "min_margin": self.min_margin,
                "violations": self.violations, "ok": self.ok, **self.details}


def random_pairs(params0, radius: float, n: int, seed: int = 0):
    """``n`` pairs of flat parameter vectors drawn uniformly in a ball around ``params0``."""
    w0 = flatten(params0)
    out = []
    for k in range(n):
        rng = np.random.default_rng([seed, k])
        out.append((bounds._ball_point(rng, w0, radius), bounds._ball_point(rng, w0, radius)))
    return out


def _grad_pair(ctx, like, x, y, ctx_y=None):
    gx = risk.grad_R(ctx, like.with_flat(x))
    gy = risk.grad_R(ctx if ctx_y is None else ctx_y, like.with_flat(y))
    return gx, gy


def check_cocoercivity_global(ctx, like, pairs, eta: float, eps: float, beta: float) -> MarginReport:
    """Margins of the weakly co-coercive inequality under global weak convexity.

    ``<dg, dw> >= 2 eta (1 - beta eta / 2) ||dg||^2 - eps ||dw - eta dg||^2``
    """
    margins = []
    for x, y in pairs:
        gx, gy = _grad_pair(ctx, like, x, y)
        dg, dw = gx - gy, x - y
        rhs = 2.0 * eta * (1.0 - beta * eta / 2.0) * dg @ dg - eps * np.sum((dw - eta * dg) ** 2)
        margins.append(float(dg @ dw - rhs))
    return MarginReport("cocoercivity_global", np.array(margins), details={"eta": eta, "eps": eps, "beta": beta})


def check_cocoercivity_pointwise(ctx, like, pairs, eta: float, eps_s, beta: float, rho: float,
                                 ctx_pairs=None) -> MarginReport:
    """Margins of the pointwise inequality with its ``2 beta / N`` and cubic terms.

    ``eps_s`` gives one weak-convexity value per pair. Both gradients are
    of the unperturbed risk ``R``, as in the inequality itself.
    """
    eps_s = np.broadcast_to(np.asarray(eps_s, dtype=float), (len(pairs),))
    N = ctx.N
    margins = []
    for (x, y), e in zip(pairs, eps_s):
        gx, gy = _grad_pair(ctx, like, x, y)
        dg, dw = gx - gy, x - y
        D = float(np.linalg.norm(dw - eta * dg))
        rhs = (2.0 * eta * (1.0 - beta * eta / 2.0) * dg @ dg
               - (e + 2.0 * beta / N) * D ** 2 - (rho / 3.0) * D ** 3)
        margins.append(float(dg @ dw - rhs))
    return MarginReport("cocoercivity_pointwise", np.array(margins), details={"eta": eta, "beta": beta, "rho": rho})


def pointwise_eps(ctx, like, x, y, i, z_prime) -> float:
    """``max(0, -lmin hess R(x), -lmin hess R^(i)(y))`` by dense eigensolves."""
    ctx_i = ctx.with_dataset(ctx.dataset.replace_point(i, *z_prime))
    lx = np.linalg.eigvalsh(risk.dense_hessian(ctx, like.with_flat(x)))[0]
    ly = np.linalg.eigvalsh(risk.dense_hessian(ctx_i, like.with_flat(y)))[0]
    return float(max(0.0, -lx, -ly))


def check_expansiveness(ctx, like, pairs, eta: float, eps: float) -> MarginReport:
    """``||dw - eta dg|| <= ||dw|| / sqrt(1 - 2 eta eps)``, as ``factor ||dw|| - ||dw - eta dg||``."""
    factor = bounds.expansiveness_factor(eta, eps)
    margins, ratios = [], []
    for x, y in pairs:
        gx, gy = _grad_pair(ctx, like, x, y)
        dw = x - y
        lhs = float(np.linalg.norm(dw - eta * (gx - gy)))
        base = float(np.linalg.norm(dw))
        margins.append(factor * base - lhs)
        ratios.append(lhs / base if base > 0 else 0.0)
    return MarginReport("expansiveness", np.array(margins),
                        details={"factor": factor, "max_ratio": float(max(ratios, default=0.0))})


def check_descent(traj, tol_scale: float = 1e-9) -> MarginReport:
    """``R_{s+1} <= R_s - (eta_s / 2) ||grad R_s||^2 + 1e-9 (1 + |R_s|)`` along a run."""
    R = np.asarray(traj.R_series)
    g = np.asarray(traj.grad_norm_series)
    eta = np.asarray(traj.etas)
    n = len(eta)
    tol = tol_scale * (1.0 + np.abs(R[:n]))
    margins = R[:n] - 0.5 * eta * g[:n] ** 2 + tol - R[1: n + 1]
    return MarginReport("descent", margins, tol=0.0)


def check_trajectory_norm(traj, tol: float = 1e-9) -> MarginReport:
    """``||w_s - w_0|| <= sqrt(2 (sum_{j<s} eta_j) (R_0 - R_s))`` along a run."""
    R = np.asarray(traj.R_series)
    dist = np.asarray(traj.dist_from_init_series)
    cum = np.concatenate([[0.0], np.cumsum(traj.etas)])
    n = len(cum)
    bound = np.sqrt(2.0 * cum * np.maximum(R[0] - R[:n], 0.0))
    return MarginReport("trajectory_norm", bound + tol - dist[:n], tol=0.0)


def check_v_growth(traj, like: TwoLayerParams, ctx, tol: float = 1e-12) -> MarginReport:
    """``||v^{s+1}||_inf <= ||v^s||_inf + eta_s Lg' Ls / M^c``."""
    vinf = np.asarray(traj.v_inf_series)
    eta = np.asarray(traj.etas)
    n = len(eta)
    step = eta * ctx.loss.L_g_prime * ctx.activation.L_sigma / like.M ** like.c
    return MarginReport("v_growth", vinf[:n] + step + tol - vinf[1: n + 1], tol=0.0)


# ---------------------------------------------------------------- stability

@dataclass
class StabilityResult:
    resample_indices: list
    reservoir_indices: list
    deviation_series: np.ndarray  # (k, steps + 1)
    per_index_gap: np.ndarray
    empirical_gen_gap: float
    gap_std_error: float
    bound_value: float
    bound_report: bounds.BoundReport | None
    constants: bounds.BoundConstants | None
    eps: float

    @property
    def max_deviation_per_step(self) -> np.ndarray:
        if self.deviation_series.size == 0:
            return np.zeros(0)
        return self.deviation_series.max(axis=0)

    def summary(self) -> dict:
        return {
            "k_resamples": len(self.resample_indices),
            "empirical_gen_gap": self.empirical_gen_gap,
            "gap_std_error": self.gap_std_error,
            "bound_value": self.bound_value,
            "bound_conditions_ok": None if self.bound_report is None else self.bound_report.all_ok,
            "eps": self.eps,
            "max_final_deviation": float(self.max_deviation_per_step[-1]) if self.deviation_series.size else 0.0,
        }


def stability_bound_inputs(ctx, config: GDConfig, radius: float):
    """``(eps, constants)`` valid on the ball of ``radius`` around the start.

    With a fixed second layer ``eps`` is the global closed form and the
    analytic constants are global too; otherwise both hold for every point
    whose output layer stays within ``radius`` of the start.
    """
    from .optimizer import initial_params

    p0 = initial_params(config, ctx.dataset.d)
    cov = empirical_covariance(ctx.dataset)
    consts = bounds.constants_estimate(ctx, p0, radius=max(radius, 1e-12), mode="analytic")
    if p0.train_second_layer:
        v_cap = float(np.max(np.abs(p0.v))) + radius
        capped = TwoLayerParams(p0.A, np.full(p0.M, v_cap), p0.c, True)
        eps = -spectral.two_layer_bound(capped, cov, ctx.activation, ctx.loss)
    else:
        eps = bounds.certified_epsilon(p0, cov, ctx.activation, ctx.loss)
    return eps, consts


def stability_experiment(ctx_train, reservoir: Dataset | None, config: GDConfig, k_resamples: int | None = None,
                         seed: int = 0, threads: int = 1, self_resample: bool = False) -> StabilityResult:
    """Monte-Carlo estimate of the stability identity for the generalisation gap.

    For each of ``k_resamples`` training indices ``i`` (default ``min(N, 32)``),
    GD is rerun with ``Z_i`` replaced by a fresh reservoir point ``Z_i'``. The
    gap estimate averages ``l(w^(i), Z_i') - l(w, Z_i')`` at the final iterate
    and is compared with the global weak-convexity bound evaluated with
    certified constants. ``self_resample`` uses ``Z_i' = Z_i``.
    """
    N = ctx_train.N
    k = min(N, 32) if k_resamples is None else int(k_resamples)
    if not 1 <= k <= N:
        raise ValueError(f"k_resamples must lie in [1, {N}]")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(N, size=k, replace=False))
    if self_resample:
        zs = [(ctx_train.X[i], ctx_train.y[i]) for i in idx]
        res_idx = [int(i) for i in idx]
    else:
        if reservoir is None or reservoir.n < k:
            raise ValueError(f"reservoir needs at least {k} points")
        res_idx = [int(j) for j in np.sort(rng.choice(reservoir.n, size=k, replace=False))]
        zs = [(reservoir.X[j], reservoir.y[j]) for j in res_idx]

    fields_ = {f: getattr(config, f) for f in config.__dataclass_fields__}
    fields_.update(record_stride=1, early_stopping=False)
    cfg = GDConfig(**fields_)
    base = run_gd(ctx_train, None, cfg)
    base_w = np.array([flatten(p) for _, p in base.snapshots])
    final = base.final_params

    def one(args):
        i, z = args
        traj = run_resampled(ctx_train, cfg, int(i), z)
        other = np.array([flatten(p) for _, p in traj.snapshots])
        dev = np.linalg.norm(base_w - other, axis=1)
        gap = risk.point_loss(ctx_train, traj.final_params, *z) - risk.point_loss(ctx_train, final, *z)
        reach = float(np.max(np.linalg.norm(other - base_w[0], axis=1)))
        return dev, gap, reach

    results = _map(one, list(zip(idx, zs)), threads)
    devs = np.array([r[0] for r in results])
    gaps = np.array([r[1] for r in results])
    radius = max([float(np.max(np.linalg.norm(base_w - base_w[0], axis=1)))] + [r[2] for r in results])
    gap_mean = float(np.mean(gaps))
    se = float(np.std(gaps, ddof=1) / math.sqrt(k)) if k > 1 else 0.0

    report, bound_value, consts, eps = None, math.nan, None, math.nan
    if cfg.schedule.kind == "constant" and cfg.t_max >= 1:
        eps, consts = stability_bound_inputs(ctx_train, cfg, radius * (1.0 + 1e-9))
        eta = float(cfg.schedule.eta)
        if 2.0 * eta * eps < 1.0:
            report = bounds.gen_bound_global(eta, eps, consts.L, N, cfg.t_max, beta=consts.beta)
            bound_value = report.value
    elif cfg.t_max == 0:
        bound_value = 0.0
    return StabilityResult([int(i) for i in idx], res_idx, devs, gaps, gap_mean, se, bound_value, report, consts, eps)


# ---------------------------------------------------------------- sweep

@dataclass(frozen=True)
class SweepSpec:
    c_values: tuple = (0.5, 0.55, 0.6, 0.65)
    M_values: tuple = (1000,)
    replications: int = 10
    seed: int = 0
    eta: float = 0.1
    t_max: int = 50_000
    eval_every: int = 500
    patience: int = 5
    N_train: int = 500
    N_test: int = 5000
    d: int = 10
    M_star: int = 50
    mu: float = 0.0
    label_noise: bool = True
    activation: str = "sigmoid"
    v_scale: float = 1.0
    measure_eps: bool = False


@dataclass
class SweepResult:
    spec: SweepSpec
    cells: list  # dicts ordered by (c, M, rep)

    COLUMNS = ("c", "M", "rep", "status", "frob_A", "norm_v", "best_test_risk", "steps", "tw", "eps_at_stop")

    def ok_cells(self):
        return [r for r in self.cells if r["status"] == "ok"]

    def frob_by_c(self, M):
        """Replication-averaged final ``||A||_F`` per ``c`` at width ``M``."""
        out = {}
        for c in self.spec.c_values:
            vals = [r["frob_A"] for r in self.ok_cells() if r["c"] == c and r["M"] == M]
            out[c] = float(np.mean(vals)) if vals else math.nan
        return out

    def spearman_c_frob(self, M) -> float:
        by_c = self.frob_by_c(M)
        cs = sorted(by_c)
        if len(cs) < 2:
            return math.nan
        return float(spearmanr(cs, [by_c[c] for c in cs]).statistic)

    def median_test_by_M(self, c):
        out = {}
        for M in self.spec.M_values:
            vals = [r["best_test_risk"] for r in self.ok_cells() if r["c"] == c and r["M"] == M]
            out[M] = float(np.median(vals)) if vals else math.nan
        return out

    def summary(self) -> dict:
        spearman = {str(M): self.spearman_c_frob(M) for M in self.spec.M_values}
        medians = {str(c): {str(M): v for M, v in self.median_test_by_M(c).items()} for c in self.spec.c_values}
        monotone = {}
        for c in self.spec.c_values:
            vals = list(self.median_test_by_M(c).values())
            monotone[str(c)] = bool(all(b <= a for a, b in zip(vals, vals[1:])))
        return {
            "cells": len(self.cells),
            "failed": sum(r["status"] != "ok" for r in self.cells),
            "spearman_c_frobA": spearman,
            "median_best_test_risk": medians,
            "test_risk_nonincreasing_in_M": monotone,
        }

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.cells:
                w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in self.COLUMNS])

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True))


def replication_data(spec: SweepSpec, rep: int):
    """Train/test split for one replication; shared by every (c, M) cell."""
    seed = int(np.random.SeedSequence([spec.seed, rep]).generate_state(1)[0])
    ts = TeacherSpec(M_star=spec.M_star, d=spec.d, mu=spec.mu, seed=seed, N_train=spec.N_train,
                     N_test=spec.N_test, label_noise=spec.label_noise, activation=spec.activation)
    return synth_teacher(ts)


def cell_seed(spec: SweepSpec, M: int, rep: int) -> int:
    # c is left out on purpose: cells that differ only in c share their start
    return int(np.random.SeedSequence([spec.seed, M, rep]).generate_state(1)[0])


def run_cell(spec: SweepSpec, c: float, M: int, rep: int, data=None) -> dict:
    from .model import Activation

    data = replication_data(spec, rep) if data is None else data
    act = Activation(spec.activation)
    ctx = risk.RiskContext(data.train, activation=act)
    ctx_test = risk.RiskContext(data.test, activation=act)
    cfg = GDConfig(Schedule.constant(spec.eta), spec.t_max, M=M, c=c, seed=cell_seed(spec, M, rep),
                   v_scale=spec.v_scale, early_stopping=True, eval_every=spec.eval_every,
                   patience=spec.patience)
    row = {"c": c, "M": M, "rep": rep, "status": "ok", "frob_A": math.nan, "norm_v": math.nan,
           "best_test_risk": math.nan, "steps": 0, "tw": math.nan, "eps_at_stop": math.nan}
    try:
        traj = run_gd(ctx, ctx_test, cfg)
    except DivergenceError as exc:
        row["status"] = f"failed: diverged at step {exc.step}"
        return row
    p = traj.final_params
    row.update(frob_A=float(np.linalg.norm(p.A)), norm_v=float(np.linalg.norm(p.v)),
               best_test_risk=float(traj.best_test()[1]), steps=traj.steps_run,
               tw=bounds.total_weight(p).value)
    if spec.measure_eps:
        row["eps_at_stop"] = spectral.risk_lambda_min(ctx, p, tol=1e-8).epsilon
    return row


def scaling_sweep(spec: SweepSpec, threads: int = 1) -> SweepResult:
    """Train every ``(c, M, rep)`` cell with early stopping and collect summaries."""
    if not spec.c_values or not spec.M_values or spec.replications < 1:
        raise ValueError("sweep grid is empty")
    data = {rep: replication_data(spec, rep) for rep in range(spec.replications)}
    keys = [(c, M, rep) for c in spec.c_values for M in spec.M_values for rep in range(spec.replications)]
    rows = _map(lambda k: run_cell(spec, *k, data=data[k[2]]), keys, threads)
    return SweepResult(spec, rows)


# ---------------------------------------------------------------- construction

def disjoint_support_construct(d: int, s: int, M: int, a1: float, a2: float, c: float,
                               trace: float = 1.0, eta_t: float = 1.0):
    """Low-rank first layer whose left singular vectors have disjoint supports.

    Singular vector ``l`` is ``1/sqrt(s)`` on rows ``l*s .. l*s + s - 1``
    and zero elsewhere, the right singular vectors are the standard basis,
    all singular values equal ``a2`` and ``v*`` is ``a1`` on supported rows.
    """
    if d * s > M:
        raise ValueError(f"needs d * s <= M, got {d} * {s} > {M}")
    if a1 <= 0 or a2 <= 0 or s < 1 or d < 1:
        raise ValueError("a1, a2 must be positive and d, s at least 1")
    gammas = np.zeros((d, M))
    for l in range(d):
        gammas[l, l * s:(l + 1) * s] = 1.0 / math.sqrt(s)
    A = a2 * gammas.T  # sum_l a2 gamma_l e_l^T
    v = np.zeros(M)
    v[: d * s] = a1
    omega = TwoLayerParams(A, v, c, True)
    Mc = M ** c
    tw = bounds.total_weight(omega).value
    H = bounds.h_functional((A, v), eta_t, mode="exact")
    # ||A||_F^2 = d a2^2, so the first term carries a2 / a1; it reduces to 1 / a1 only at a2 = 1
    ratio_formula = math.sqrt(trace) * (a2 / (a1 * math.sqrt(s)) + math.sqrt(eta_t) / (a2 * math.sqrt(d))
                                        + 1.0 / math.sqrt(d))
    stated = bool(s > d >= 9 and a1 >= 1 and a2 >= 1 and eta_t * trace <= d / 9)
    report = {
        "tw": tw,
        "tw_formula": a1 * a2 * d * math.sqrt(s) / Mc,
        "norm_v": float(np.linalg.norm(v)),
        "norm_v_formula": a1 * math.sqrt(d * s),
        "frob_A": float(np.linalg.norm(A)),
        "frob_A_formula": a2 * math.sqrt(d),
        "gamma_l1": [float(np.sum(np.abs(g))) for g in gammas],
        "H": H,
        "ratio_exact": math.sqrt(trace) * H / (Mc * tw),
        "ratio_formula": ratio_formula,
        "ratio_conditions": stated,
        # each of the three terms is at most 1/3 once trace <= d/9 (implied by eta t >= 1) and a2 <= a1
        "ratio_conditions_sufficient": bool(stated and eta_t >= 1 and a2 <= a1),
    }
    return omega, report
