"""Acceptance suite: one test and one printed pass/fail line per criterion.

Tolerances, instance sizes and runtime limits are pinned here; a test that
runs over its time budget fails even if its numbers are right.
"""

import math
import time
from pathlib import Path

import numpy as np

from conftest import central_diff, record_criterion
from wclab import bounds, cli, lab, risk, spectral
from wclab.data import Dataset, covariance_of_rows, empirical_covariance
from wclab.model import Activation, ThreeLayerParams, TwoLayerParams, flatten, forward, grad_f
from wclab.optimizer import GDConfig, Schedule, run_gd, run_paired, step_sizes

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def random_dataset(rng, N, d):
    X = rng.standard_normal((N, d))
    return Dataset(X, np.where(rng.random(N) < 0.5, -1.0, 1.0))


def random_two_layer(rng, M, d, trained=True):
    c = rng.choice([0.5, 0.75, 1.0])
    return TwoLayerParams(rng.uniform(0.2, 2.0) * rng.standard_normal((M, d)),
                          rng.uniform(0.2, 3.0) * rng.standard_normal(M), c, trained)


def random_three_layer(rng, M1, M2, d):
    c = rng.choice([0.5, 0.75, 1.0])
    return ThreeLayerParams(rng.standard_normal((M1, d)), rng.standard_normal((M2, M1)),
                            rng.uniform(0.2, 3.0) * rng.standard_normal(M2), c)


def dense_lambda_min(ctx, p):
    return float(np.linalg.eigvalsh(risk.dense_hessian(ctx, p))[0])


def test_criterion_01_derivatives():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_fd, worst_hvp = 0.0, 0.0
    for k in range(100):
        N, d = int(rng.integers(1, 21)), int(rng.integers(1, 9))
        kind = k % 3
        if kind == 2:
            p = random_three_layer(rng, int(rng.integers(1, 9)), int(rng.integers(1, 9)), d)
        else:
            p = random_two_layer(rng, int(rng.integers(1, 9)), d, trained=kind == 0)
        act = Activation(["sigmoid", "tanh"][k % 2])
        ctx = risk.RiskContext(random_dataset(rng, N, d), activation=act)
        w = flatten(p)
        x = ctx.X[0]
        fd_f = central_diff(lambda u: float(forward(p.with_flat(u), x, act)), w)
        fd_R = central_diff(risk.risk_fn(ctx, p), w)
        worst_fd = max(worst_fd, np.max(np.abs(grad_f(p, x, act) - fd_f)),
                       np.max(np.abs(risk.grad_R(ctx, p) - fd_R)))
        u = rng.standard_normal(w.size)
        Hu = risk.dense_hessian(ctx, p) @ u
        rel = np.linalg.norm(risk.hvp_R(ctx, p, u) - Hu) / max(np.linalg.norm(Hu), 1e-300)
        worst_hvp = max(worst_hvp, rel)
    elapsed = time.perf_counter() - t0
    ok = worst_fd < 1e-6 and worst_hvp < 1e-8 and elapsed < 30
    record_criterion(1, ok, f"max FD abs err {worst_fd:.2e} (<1e-6), max hvp rel err {worst_hvp:.2e} (<1e-8), "
                            f"{elapsed:.1f}s (<30s)")
    assert ok


def test_criterion_02_closed_form_bounds():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    v2 = v3 = 0
    worst = math.inf
    for _ in range(1000):
        N, d, M = int(rng.integers(1, 31)), int(rng.integers(1, 7)), int(rng.integers(1, 17))
        ctx = risk.RiskContext(random_dataset(rng, N, d))
        p = random_two_layer(rng, M, d, trained=bool(rng.integers(2)))
        gap = dense_lambda_min(ctx, p) - spectral.two_layer_bound(p, empirical_covariance(ctx.dataset))
        worst = min(worst, gap)
        v2 += gap < -1e-10
    for _ in range(500):
        N, d = int(rng.integers(1, 31)), int(rng.integers(1, 7))
        ctx = risk.RiskContext(random_dataset(rng, N, d))
        p = random_three_layer(rng, int(rng.integers(1, 9)), int(rng.integers(1, 9)), d)
        bound = spectral.three_layer_bound(p, empirical_covariance(ctx.dataset), covariance_of_rows(p.A2))
        gap = dense_lambda_min(ctx, p) - bound
        worst = min(worst, gap)
        v3 += gap < -1e-10
    elapsed = time.perf_counter() - t0
    ok = v2 == 0 and v3 == 0 and elapsed < 300
    record_criterion(2, ok, f"two-layer violations {v2}/1000, three-layer violations {v3}/500, "
                            f"min slack {worst:.2e}, {elapsed:.1f}s (<300s)")
    assert ok


def test_criterion_03_width_scaling():
    t0 = time.perf_counter()
    widths = (8, 16, 32, 64, 128)
    d, N = 4, 20
    medians = {}
    const_err = 0.0
    for c in (0.5, 0.75, 1.0):
        eps = {M: [] for M in widths}
        for seed in range(20):
            rng = np.random.default_rng([3, seed])
            ctx = risk.RiskContext(random_dataset(rng, N, d))
            cov = empirical_covariance(ctx.dataset)
            scaled = []
            for M in widths:
                wrng = np.random.default_rng([3, seed, M])
                # bounded start: entries uniform in [-1, 1]
                p = TwoLayerParams(wrng.uniform(-1, 1, (M, d)), wrng.uniform(-1, 1, M), c, True)
                eps[M].append(abs(min(0.0, dense_lambda_min(ctx, p))))
                unit_v = TwoLayerParams(p.A, np.ones(M), c, True)
                scaled.append(abs(spectral.two_layer_bound(unit_v, cov)) * M ** c)
            const_err = max(const_err, (max(scaled) - min(scaled)) / scaled[0])
        medians[c] = [float(np.median(eps[M])) for M in widths]
    monotone = all(all(b <= a for a, b in zip(m, m[1:])) for m in medians.values())
    elapsed = time.perf_counter() - t0
    ok = monotone and const_err <= 1e-12 and elapsed < 300
    shown = "; ".join(f"c={c}: " + ",".join(f"{x:.3g}" for x in m) for c, m in medians.items())
    record_criterion(3, ok, f"median eps non-increasing in M: {monotone} [{shown}], "
                            f"bound*M^c spread {const_err:.1e} (<=1e-12), {elapsed:.1f}s (<300s)")
    assert ok


def _fixed_sigmoid_instance():
    rng = np.random.default_rng(4)
    ctx = risk.RiskContext(random_dataset(rng, 40, 3))
    p0 = TwoLayerParams(np.zeros((8, 3)), rng.standard_normal(8), 0.5, False)
    return ctx, p0


def test_criterion_04_lemma_suites():
    t0 = time.perf_counter()
    ctx, p0 = _fixed_sigmoid_instance()
    k = bounds.constants_estimate(ctx, p0, mode="analytic")
    eps = bounds.certified_epsilon(p0, empirical_covariance(ctx.dataset))
    eta = 1.0 / k.beta
    pairs = lab.random_pairs(p0, 2.0, 1000, seed=4)
    traj = run_gd(ctx, config=GDConfig(Schedule.constant(eta), 1000, M=8, train_second_layer=False,
                                       init="custom", init_params=p0))
    reports = [lab.check_cocoercivity_global(ctx, p0, pairs, eta, eps, k.beta),
               lab.check_expansiveness(ctx, p0, pairs, eta, eps),
               lab.check_descent(traj), lab.check_trajectory_norm(traj)]

    # pointwise lemma along a paired run with both layers trained
    rng = np.random.default_rng(40)
    ctx2 = risk.RiskContext(random_dataset(rng, 20, 2))
    z = (rng.standard_normal(2), 1.0)
    cfg = GDConfig(Schedule.constant(0.5), 200, M=4, seed=4)
    paired = run_paired(ctx2, cfg, 3, z)
    snaps = [(flatten(a), flatten(b)) for (_, a), (_, b) in zip(paired.traj.snapshots, paired.traj_i.snapshots)]
    start = paired.traj.initial_params
    reach = max(max(np.linalg.norm(x - flatten(start)), np.linalg.norm(y - flatten(start))) for x, y in snaps)
    oracle = bounds.constants_estimate(ctx2, start, radius=reach, n_samples=200, seed=4)
    eps_s = [lab.pointwise_eps(ctx2, start, x, y, 3, z) for x, y in snaps]
    reports.append(lab.check_cocoercivity_pointwise(ctx2, start, snaps, 0.5, eps_s, oracle.beta, oracle.rho))

    elapsed = time.perf_counter() - t0
    counts_ok = all(r.margins.size >= 1000 for r in reports[:4]) and reports[4].margins.size == 201
    ok = all(r.min_margin >= -1e-9 for r in reports) and counts_ok and elapsed < 300
    shown = ", ".join(f"{r.name} {r.min_margin:.2e}" for r in reports)
    record_criterion(4, ok, f"min margins (>=-1e-9): {shown}; {elapsed:.1f}s (<300s)")
    assert ok


def test_criterion_05_convex_recovery():
    t0 = time.perf_counter()
    eta, L, N, t = 0.1, 1.3, 100, 50
    rel = abs(bounds.gen_bound_global(eta, 0.0, L, N, t).value / (2 * eta * L * L * t / N) - 1)
    rng = np.random.default_rng(5)
    ctx = risk.RiskContext(random_dataset(rng, 50, 3), activation=Activation("linear"))
    pool = random_dataset(rng, 100, 3)
    cfg = GDConfig(Schedule.constant(0.2), 100, M=6, train_second_layer=False, seed=5)
    res = lab.stability_experiment(ctx, pool, cfg, k_resamples=20, seed=5)
    cum = np.concatenate([[0.0], np.cumsum(step_sizes(cfg.schedule, cfg.t_max))])
    limit = 2 * res.constants.L * cum / ctx.N + 1e-9
    worst = float(np.max(res.deviation_series - limit[None, :]))
    elapsed = time.perf_counter() - t0
    ok = rel <= 1e-15 and worst <= 0 and res.eps == 0.0 and elapsed < 120
    record_criterion(5, ok, f"eps=0 bound rel err {rel:.1e} (<=1e-15), max deviation minus 2L sum(eta)/N "
                            f"{worst:.2e} (<=1e-9 slack), {elapsed:.1f}s (<120s)")
    assert ok


def test_criterion_06_stability_vs_bound():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    ctx = risk.RiskContext(random_dataset(rng, 200, 3))
    pool = random_dataset(rng, 400, 3)
    p0 = TwoLayerParams(np.zeros((10, 3)), rng.standard_normal(10), 0.5, False)
    # a small step keeps eta eps t near 2, where the bound is informative rather than astronomically large
    eta = 0.05
    cfg = GDConfig(Schedule.constant(eta), 500, M=10, train_second_layer=False, init="custom", init_params=p0)
    res = lab.stability_experiment(ctx, pool, cfg, k_resamples=32, seed=6)
    rep = res.bound_report
    elapsed = time.perf_counter() - t0
    gap = abs(res.empirical_gen_gap)
    ok = (rep is not None and rep.all_ok and eta * res.constants.beta <= 1.5 and 2 * eta * res.eps < 1
          and gap <= res.bound_value + 3 * res.gap_std_error and elapsed < 600)
    record_criterion(6, ok, f"|gap| {gap:.3e} <= bound {res.bound_value:.3e} + 3se ({res.gap_std_error:.1e}); "
                            f"eps {res.eps:.3g}, eta*beta {eta * res.constants.beta:.2f}, {elapsed:.1f}s (<600s)")
    assert ok


def test_criterion_07_sweep_trends():
    t0 = time.perf_counter()
    c_spec = lab.SweepSpec(M_values=(1000,))
    m_spec = lab.SweepSpec(c_values=(0.5,), M_values=(64, 256, 1024))
    c_res = lab.scaling_sweep(c_spec)
    m_res = lab.scaling_sweep(m_spec)
    rho = c_res.spearman_c_frob(1000)
    med = m_res.median_test_by_M(0.5)
    meds = [med[M] for M in (64, 256, 1024)]
    non_increasing = all(b <= a for a, b in zip(meds, meds[1:]))
    elapsed = time.perf_counter() - t0
    ok = rho > 0.8 and non_increasing and elapsed < 1200 and len(c_res.ok_cells()) == len(c_res.cells)
    record_criterion(7, ok, f"spearman(c, ||A||_F) {rho:.3f} (>0.8); median best test risk over M=64,256,1024 "
                            f"{', '.join(f'{m:.5f}' for m in meds)} non-increasing: {non_increasing}; "
                            f"{elapsed:.0f}s (<1200s)")
    assert ok


def test_criterion_08_disjoint_support():
    t0 = time.perf_counter()
    grid = [(d, s, a, eta_t) for d in (9, 12) for s in (d + 1, 2 * d) for a in (1.0, 2.5)
            for eta_t in (1.0, 3.0)] + [(9, 16, 1.0, 1.0), (10, 11, 1.0, 1.5), (15, 40, 1.2, 1.0),
                                         (20, 21, 3.0, 9.0)]
    assert len(grid) == 20
    tw_err = l1_err = 0.0
    ratio_ok = True
    worst_ratio = 0.0
    for d, s, a, eta_t in grid:
        trace = d / 9 / eta_t
        _, rep = lab.disjoint_support_construct(d, s, d * s + 5, a, a, 0.75, trace=trace, eta_t=eta_t)
        tw_err = max(tw_err, abs(rep["tw"] / rep["tw_formula"] - 1))
        l1_err = max(l1_err, max(abs(g - math.sqrt(s)) / math.sqrt(s) for g in rep["gamma_l1"]))
        ratio_ok &= rep["ratio_conditions"] and rep["ratio_exact"] <= 1.0
        ratio_ok &= abs(rep["ratio_exact"] / rep["ratio_formula"] - 1) <= 1e-12
        worst_ratio = max(worst_ratio, rep["ratio_exact"])
    elapsed = time.perf_counter() - t0
    ok = tw_err <= 1e-12 and l1_err <= 1e-12 and ratio_ok and elapsed < 10
    record_criterion(8, ok, f"TW rel err {tw_err:.1e}, ||gamma||_1 rel err {l1_err:.1e} (<=1e-12), "
                            f"max ratio {worst_ratio:.4f} (<=1) on 20 points, {elapsed:.2f}s (<10s)")
    assert ok


def test_criterion_09_bound_evaluators():
    t0 = time.perf_counter()
    t, N = 100, 10_000
    rep = bounds.gen_bound_pointwise(np.full(t, 0.01), np.full(t - 1, 0.01), 0.75, 1.0, 1.0, 1.0, N)
    a = 2 * 0.01 * (0.01 + 4 / N) + 0.01 ** (4 / 3)
    rev = 4 / N * math.fsum(math.exp(a * (t - 1 - j)) * 0.01 for j in reversed(range(t)))
    rel = abs(rep.value / rev - 1)

    checks = []
    # step condition: eta beta = 3/2 exactly passes, just above fails
    at = bounds.gen_bound_pointwise([0.5, 0.5], [0.0], 1.0, 3.0, 1.0, 0.0, 10**9)
    above = bounds.gen_bound_pointwise([0.5, 0.5], [0.0], 1.0, 3.0 + 1e-12, 1.0, 0.0, 10**9)
    checks += [at.condition("max_k eta_k beta").ok, not above.condition("max_k eta_k beta").ok]
    # mixed condition is strict at 1/2
    on = bounds.gen_bound_pointwise([0.25] * 3, [1.0] * 3, 1.0, 0.0, 1.0, 0.0, 100)
    below = bounds.gen_bound_pointwise([0.25] * 3, [0.999] * 3, 1.0, 0.0, 1.0, 0.0, 100)
    checks += [not on.condition("max_k eta_k (eps_k").ok, below.condition("max_k eta_k (eps_k").ok]
    # sample size: requirement independent of N when beta = 0
    etas, eps = [0.1] * 4, [0.2] * 3
    need = bounds.gen_bound_pointwise(etas, eps, 1.0, 0.0, 1.0, 5.0, 1).terms["n_required"]
    checks += [not bounds.gen_bound_pointwise(etas, eps, 1.0, 0.0, 1.0, 5.0, math.floor(need)).condition("N >=").ok,
               bounds.gen_bound_pointwise(etas, eps, 1.0, 0.0, 1.0, 5.0, math.ceil(need)).condition("N >=").ok]
    # global preconditions at the edge
    g = bounds.gen_bound_global(0.5, (1 - 1e-9) / (2 * 0.5), 1.0, 10, 3, beta=3.0)
    checks += [g.all_ok, g.condition("eta beta").actual == 1.5]
    g2 = bounds.gen_bound_global(0.5, 0.1, 1.0, 10, 3, beta=3.0 + 1e-12)
    checks += [not g2.condition("eta beta").ok]
    try:
        bounds.gen_bound_global(0.5, 1.0, 1.0, 10, 3)
        checks.append(False)
    except ValueError:
        checks.append(True)
    elapsed = time.perf_counter() - t0
    ok = rel <= 1e-12 and all(checks) and elapsed < 10
    record_criterion(9, ok, f"reversed re-summation rel err {rel:.1e} (<=1e-12), boundary pass/fail "
                            f"{sum(checks)}/{len(checks)} correct, {elapsed:.2f}s (<10s)")
    assert ok


def test_criterion_10_cli_determinism(tmp_path):
    cases = [("train", "train.json"), ("stability", "stability.json"), ("spectrum", "spectrum.json"),
             ("bounds", "bounds.json"), ("check", "lemmas.json"), ("sweep", "sweep_small.json")]
    same = []
    for command, config in cases:
        first = tmp_path / command / "first"
        assert cli.run_cli([command, "--config", str(CONFIGS / config), "--out", str(first)]) == 0
        ref = (first / "results.csv").read_bytes()
        for threads in (1, 4):
            again = tmp_path / command / f"t{threads}"
            rc = cli.run_cli([command, "--config", str(first / "config_echo.json"), "--out", str(again),
                              "--threads", str(threads)])
            same.append(rc == 0 and (again / "results.csv").read_bytes() == ref)
    ok = all(same)
    record_criterion(10, ok, f"byte-identical results.csv on rerun from config_echo.json: "
                             f"{sum(same)}/{len(same)} (subcommands x threads 1,4)")
    assert ok
