"""Bound evaluators with every intermediate term and precondition reported.

Covers the pointwise and global weak-convexity generalisation bounds, the
three-term test-error bound, smoothness constants (analytic worst case or
sampled), Total Weight, the structured penalty functionals ``G_C`` and ``H``,
and the (mu, c) regime classifier.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import risk
from .data import CovarianceSummary, empirical_covariance
from .model import SIGMOID, ThreeLayerParams, TwoLayerParams, flatten


# ---------------------------------------------------------------- reports

@dataclass
class Condition:
    desc: str
    required: float
    actual: float
    ok: bool

    def to_dict(self):
        return {"desc": self.desc, "required": self.required, "actual": self.actual, "ok": bool(self.ok)}


@dataclass
class BoundReport:
    name: str
    value: float
    terms: dict = field(default_factory=dict)
    conditions: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def all_ok(self) -> bool:
        return all(c.ok for c in self.conditions)

    def condition(self, prefix: str) -> Condition:
        for c in self.conditions:
            if c.desc.startswith(prefix):
                return c
        raise KeyError(prefix)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "value": self.value,
            "terms": dict(self.terms),
            "conditions": [c.to_dict() for c in self.conditions],
            "warnings": list(self.warnings),
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text


def _le(desc, actual, required):
    return Condition(desc, float(required), float(actual), bool(actual <= required))


def _lt(desc, actual, required):
    return Condition(desc, float(required), float(actual), bool(actual < required))


def _ge(desc, actual, required):
    return Condition(desc, float(required), float(actual), bool(actual >= required))


# ---------------------------------------------------------------- constants

@dataclass(frozen=True)
class BoundConstants:
    L: float
    beta: float
    rho: float
    L_g_prime: float
    L_sigma: float
    L_sigma_prime: float
    L_sigma_second: float
    provenance: str = "analytic"
    n_samples: int = 0
    radius: float = 0.0

    def to_dict(self):
        return asdict(self)


SAFETY = 1.2


def _ball_point(rng, center, radius):
    """Uniform draw from the Euclidean ball of ``radius`` around ``center``."""
    p = center.size
    u = rng.standard_normal(p)
    u /= np.linalg.norm(u)
    return center + radius * rng.random() ** (1.0 / p) * u


def _analytic_parts(ctx, params, radius):
    """Worst-case bounds on ||grad f||, ||hess f||, ||D^3 f|| over the ball.

    With v ranging over a ball of the given radius (when trained),
    ||v||_2 <= ||v0||_2 + r and ||v||_inf <= ||v0||_inf + r. Per sample:

      ||grad f||^2  <= (Ls'^2 ||v||_2^2 ||x||^2 + [v trained] M Ls^2) / M^2c
      ||hess f||    <= (Ls'' ||v||_inf ||x||^2 + [v trained] Ls' ||x||) / M^c
      ||D^3 f||     <= (Ls''' ||v||_inf ||x||^3 + [v trained] 3 Ls'' ||x||^2) / M^c

    The output-output block vanishes, so the trained-v terms only come
    from the first-layer/output cross derivatives.
    """
    if isinstance(params, ThreeLayerParams):
        raise NotImplementedError("analytic constants cover the two-layer network; use mode='sampled'")
    act = ctx.activation
    trained = params.train_second_layer
    r_v = radius if trained else 0.0
    v2 = float(np.linalg.norm(params.v)) + r_v
    vinf = float(np.max(np.abs(params.v))) + r_v
    xn = np.linalg.norm(ctx.X, axis=1)
    Mc = params.M ** params.c
    G1_sq = act.L_sigma_prime ** 2 * v2 ** 2 * xn ** 2
    if trained:
        G1_sq = G1_sq + params.M * act.L_sigma ** 2
    G1 = np.sqrt(G1_sq) / Mc
    G2 = (act.L_sigma_second * vinf * xn ** 2 + (act.L_sigma_prime * xn if trained else 0.0)) / Mc
    G3 = (act.L_sigma_third * vinf * xn ** 3 + (3.0 * act.L_sigma_second * xn ** 2 if trained else 0.0)) / Mc
    return G1, G2, G3


def constants_estimate(ctx, params0, radius: float = 1.0, n_samples: int = 100, seed: int = 0,
                       mode: str = "sampled", dense_rho: bool = True) -> BoundConstants:
    """Lipschitz constants of the loss, its gradient and its Hessian near ``params0``.

    ``analytic`` returns worst-case products of activation and loss bounds
    over the ball of ``radius``; with a fixed second layer these hold on all
    of parameter space. ``sampled`` draws point pairs in the ball (sample
    ``k`` always comes from the stream ``[seed, k]``, so more samples can only
    raise a maximum) and multiplies every maximum by 1.2.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    act, loss = ctx.activation, ctx.loss
    common = dict(L_g_prime=loss.L_g_prime, L_sigma=act.L_sigma, L_sigma_prime=act.L_sigma_prime,
                  L_sigma_second=act.L_sigma_second)
    if mode == "analytic":
        G1, G2, G3 = _analytic_parts(ctx, params0, radius)
        L = float(np.max(loss.L_g_prime * G1))
        beta = float(np.max(loss.g2_max * G1 ** 2 + loss.L_g_prime * G2))
        rho = float(np.max(loss.g3_max * G1 ** 3 + 3.0 * loss.g2_max * G1 * G2 + loss.L_g_prime * G3))
        return BoundConstants(L, beta, rho, provenance="analytic", radius=radius, **common)
    if mode != "sampled":
        raise ValueError(f"mode must be analytic or sampled, got {mode!r}")
    if dense_rho and params0.size > risk.DENSE_GUARD:
        raise ValueError(f"p={params0.size} exceeds the dense guard; use mode='analytic' or dense_rho=False")

    w0 = flatten(params0)
    L = beta = rho = 0.0
    for k in range(n_samples):
        rng = np.random.default_rng([seed, k])
        wa = _ball_point(rng, w0, radius)
        wb = _ball_point(rng, w0, radius)
        i = int(rng.integers(ctx.N))
        pa, pb = params0.with_flat(wa), params0.with_flat(wb)
        Ga = risk.per_sample_grads(ctx, pa)
        Gb = risk.per_sample_grads(ctx, pb)
        dist = float(np.linalg.norm(wa - wb))
        L = max(L, float(np.max(np.linalg.norm(Ga, axis=1))))
        if dist > 0:
            beta = max(beta, float(np.max(np.linalg.norm(Ga - Gb, axis=1))) / dist)
        if dense_rho:
            Ha = risk.sample_hessian(ctx, pa, i)
            Hb = risk.sample_hessian(ctx, pb, i)
            beta = max(beta, float(np.linalg.norm(Ha, 2)))
            if dist > 0:
                rho = max(rho, float(np.linalg.norm(Ha - Hb, 2)) / dist)
    return BoundConstants(SAFETY * L, SAFETY * beta, SAFETY * rho, provenance="sampled",
                          n_samples=n_samples, radius=radius, **common)


def sampled_points(params0, radius, n_samples, seed, N):
    """The ``(w_a, w_b, i)`` triples that ``constants_estimate`` evaluates."""
    w0 = flatten(params0)
    out = []
    for k in range(n_samples):
        rng = np.random.default_rng([seed, k])
        wa = _ball_point(rng, w0, radius)
        wb = _ball_point(rng, w0, radius)
        out.append((wa, wb, int(rng.integers(N))))
    return out


def certified_epsilon(params: TwoLayerParams, cov: CovarianceSummary, act=SIGMOID, loss=risk.LOGISTIC) -> float:
    """Global weak-convexity constant for a network whose second layer is fixed.

    Only the first-layer block of the Hessian is present, and its residual
    part is bounded below by ``-Lg' Ls'' ||v||_inf ||S|| / M^c`` everywhere.
    """
    if params.train_second_layer:
        raise ValueError("a global certificate needs the second layer fixed")
    v_inf = float(np.max(np.abs(params.v)))
    return loss.L_g_prime * act.L_sigma_second * v_inf * cov.spectral_norm / params.M ** params.c


# ---------------------------------------------------------------- generalisation

def _sequence(values, name):
    a = np.asarray(values, dtype=float).ravel()
    if not np.all(np.isfinite(a)) or np.any(a < 0):
        raise ValueError(f"{name} must be finite and non-negative")
    return a


def gen_bound_pointwise(etas, eps, alpha: float, beta: float, L: float, rho: float, N: int,
                        t: int | None = None) -> BoundReport:
    """Generalisation bound of GD under pointwise weak convexity.

    ``value = (4 L^2 / N) sum_{j<t} exp(sum_{s=j+1}^{t-1} [2 eta_s (eps_s + 4 beta / N) + eta_s^(1/alpha)]) eta_j``

    ``etas`` holds ``eta_0..eta_{t-1}`` and may carry ``eta_t`` as an extra
    entry. ``eps`` holds ``eps_1..eps_{t-1}``; it may also be given as
    ``eps_0..eps_{t-1}`` or ``eps_0..eps_t``. The preconditions range over
    indices ``0..t``; any index that was not supplied is left out of them
    and a warning says so.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    etas = _sequence(etas, "etas")
    eps = _sequence(eps, "eps")
    t = etas.size if t is None else int(t)
    if t < 1:
        raise ValueError("t must be >= 1")
    warnings = [
        "the step-size condition uses eta_k (eps_k + 2 beta / N) + eta_k^(1/alpha) < 1/2; "
        "a variant with 2 eta_k (...) is stricter and is not applied"
    ]
    if etas.size == t + 1:
        eta_full = etas
    elif etas.size == t:
        eta_full = etas
        warnings.append("eta_t not supplied; index t is left out of the preconditions")
    else:
        raise ValueError(f"etas must have length t={t} or t+1, got {etas.size}")

    if eps.size == t - 1:
        stand_in = float(eps.max()) if eps.size else 0.0
        eps_full = np.concatenate([[stand_in], eps])
        warnings.append(f"eps_0 not supplied; max(eps)={stand_in!r} stands in for it in the preconditions")
    elif eps.size in (t, t + 1):
        eps_full = eps
    else:
        raise ValueError(f"eps must have length t-1, t or t+1 (t={t}), got {eps.size}")
    if eps_full.size < t + 1 and etas.size == t + 1:
        warnings.append("eps_t not supplied; index t is left out of the preconditions")
    T = min(eta_full.size, eps_full.size) - 1  # last index usable in the preconditions

    e = eta_full[: T + 1]
    ep = eps_full[: T + 1]
    a = 2.0 * e * (ep + 4.0 * beta / N) + e ** (1.0 / alpha)  # per-index exponent increment

    # exponent_j = sum_{s=j+1}^{t-1} a_s, from a reverse cumulative sum
    inc = a[1:t] if t > 1 else np.zeros(0)
    tail = np.concatenate([np.cumsum(inc[::-1])[::-1], [0.0]])  # tail[j] = sum_{s=j+1}^{t-1}
    terms = np.exp(tail) * etas[:t]
    prefactor = 4.0 * L ** 2 / N
    total = math.fsum(terms.tolist())
    value = prefactor * total

    step_max = float(np.max(e * beta))
    mixed_max = float(np.max(e * (ep + 2.0 * beta / N) + e ** (1.0 / alpha)))
    js = np.arange(1, T + 1)
    inner = np.cumsum(e)[js - 1] if T >= 1 else np.zeros(0)  # sum_{l<j} eta_l
    step_sum = math.fsum((e[js] ** (1.0 - 1.0 / (2.0 * alpha)) * inner).tolist()) if T >= 1 else 0.0
    exp_cond = math.fsum(a[1: T + 1].tolist())
    n_required = 24.0 * rho * L * math.exp(exp_cond) * step_sum

    conditions = [
        _le("max_k eta_k beta <= 3/2", step_max, 1.5),
        _lt("max_k eta_k (eps_k + 2 beta/N) + eta_k^(1/alpha) < 1/2", mixed_max, 0.5),
        _ge("N >= 24 rho L exp(...) sum_j eta_j^(1-1/(2 alpha)) sum_{l<j} eta_l", float(N), n_required),
    ]
    report_terms = {
        "prefactor": prefactor,
        "sum": total,
        "max_exponent": float(tail[0]),
        "n_required": n_required,
        "condition_exponent": exp_cond,
        "condition_step_sum": step_sum,
    }
    return BoundReport("gen_bound_pointwise", value, report_terms, conditions, warnings)


_EXP_MAX = math.log(np.finfo(float).max)


def gen_bound_global(eta: float, eps: float, L: float, N: int, t: int, beta: float | None = None) -> BoundReport:
    """Generalisation bound under global weak convexity with constant steps.

    ``value = (2 eta L^2 / N) sum_{k<t} exp(eta eps k / (1 - 2 eta eps))``
    """
    if 2.0 * eta * eps >= 1.0:
        raise ValueError(f"needs 2 eta eps < 1, got {2.0 * eta * eps!r}")
    rate = eta * eps / (1.0 - 2.0 * eta * eps)
    # near 2 eta eps = 1 the rate is huge; the bound is then +inf, not an error
    if rate * (t - 1) > _EXP_MAX - math.log(max(t, 1)):
        total = math.inf
    else:
        total = math.fsum(math.exp(rate * k) for k in range(t))
    prefactor = 2.0 * eta * L ** 2 / N
    conditions = [_lt("2 eta eps < 1", 2.0 * eta * eps, 1.0)]
    if beta is not None:
        conditions.insert(0, _le("eta beta <= 3/2", eta * beta, 1.5))
    return BoundReport("gen_bound_global", prefactor * total,
                       {"prefactor": prefactor, "sum": total, "rate": rate}, conditions)


def expansiveness_factor(eta: float, eps: float) -> float:
    """``1 / sqrt(1 - 2 eta eps)``, the Lipschitz constant of one GD step."""
    if 2.0 * eta * eps >= 1.0:
        raise ValueError(f"needs 2 eta eps < 1, got {2.0 * eta * eps!r}")
    return 1.0 / math.sqrt(1.0 - 2.0 * eta * eps)


def test_error_bound(eta: float, t: int, eps: float, L: float, N: int, E_dist_init_to_pen_min_sq: float,
                     E_R0_minus_Rstar: float, dist_init_to_popmin_sq: float,
                     beta: float | None = None) -> BoundReport:
    """Generalisation + optimisation + approximation bound on the test error.

    The optimisation term uses the minimiser of the penalised objective
    ``R(w) + eps ||w0 - w||^2``.
    """
    if 2.0 * eta * eps >= 1.0:
        raise ValueError(f"needs 2 eta eps < 1, got {2.0 * eta * eps!r}")
    et = eta * t
    gen = (2.0 * L ** 2 * et / N) * math.exp(et * eps / (1.0 - 2.0 * eta * eps))
    opt = E_dist_init_to_pen_min_sq / (2.0 * et) if et > 0 else math.inf
    approx = eps * (et * E_R0_minus_Rstar + dist_init_to_popmin_sq)
    conditions = [_lt("2 eta eps < 1", 2.0 * eta * eps, 1.0)]
    if beta is not None:
        conditions.insert(0, _le("eta beta <= 1/2", eta * beta, 0.5))
    terms = {"generalisation": gen, "optimisation": opt, "approximation": approx}
    return BoundReport("test_error_bound", gen + opt + approx, terms, conditions)


test_error_bound.__test__ = False  # keep pytest from collecting it on import


# ---------------------------------------------------------------- structure

@dataclass(frozen=True)
class TotalWeight:
    value: float
    upper: float


def total_weight(params: TwoLayerParams) -> TotalWeight:
    """``sum_j |v_j| ||A_j|| / M^c`` and its Cauchy-Schwarz cap ``||v|| ||A||_F / M^c``."""
    Mc = params.M ** params.c
    rows = np.linalg.norm(params.A, axis=1)
    tw = float(np.dot(np.abs(params.v), rows)) / Mc
    upper = float(np.linalg.norm(params.v) * np.linalg.norm(params.A)) / Mc
    return TotalWeight(tw, upper)


EXACT_MAX_GROUPS = 20


def _direction(u):
    if isinstance(u, TwoLayerParams):
        return np.asarray(u.A, dtype=float), np.asarray(u.v, dtype=float)
    A, v = u
    A = np.asarray(A, dtype=float)
    v = np.asarray(v, dtype=float)
    if A.ndim != 2 or v.shape != (A.shape[0],):
        raise ValueError(f"direction blocks have inconsistent shapes {A.shape}, {v.shape}")
    return A, v


def merge_parallel_rows(B, tol: float = 1e-12) -> np.ndarray:
    """Collapse rows of ``B`` that are parallel or anti-parallel.

    Each group becomes one row ``(sum_j ||b_j||) n`` along the shared unit
    direction ``n``; zero rows are dropped. The box maximum is unchanged
    because each group's signs can always be aligned.
    """
    reps, weights = [], []
    for b in B:
        nb = float(np.linalg.norm(b))
        if nb == 0.0:
            continue
        n = b / nb
        k = int(np.argmax(np.abs(n)))
        if n[k] < 0:
            n = -n
        for g, r in enumerate(reps):
            if np.linalg.norm(n - r) <= tol:
                weights[g] += nb
                break
        else:
            reps.append(n)
            weights.append(nb)
    if not reps:
        return np.zeros((0, B.shape[1]))
    return np.array(reps) * np.array(weights)[:, None]


def box_max_term(u, mode: str = "exact") -> float:
    """``max_{||z||_inf <= 1} ||A^T diag(z) v||_2`` for ``u = (A, v)``.

    The objective is convex in ``z``, so the maximum sits at a sign vertex.
    ``exact`` merges parallel rows of ``diag(v) A`` and enumerates the sign
    vertices of what is left (one sign fixed by symmetry); it refuses more
    than 20 distinct directions. ``surrogate`` returns
    ``sum_j |v_j| ||A_j||``, which is never smaller.
    """
    A, v = _direction(u)
    B = A * v[:, None]
    if mode == "surrogate":
        return float(np.sum(np.linalg.norm(B, axis=1)))
    if mode != "exact":
        raise ValueError(f"mode must be exact or surrogate, got {mode!r}")
    G = merge_parallel_rows(B)
    n_groups = G.shape[0]
    if n_groups > EXACT_MAX_GROUPS:
        raise ValueError(f"exact mode enumerates 2^{n_groups} vertices and allows at most "
                         f"{EXACT_MAX_GROUPS} distinct row directions; use mode='surrogate'")
    if n_groups == 0:
        return 0.0
    if n_groups == 1:
        return float(np.linalg.norm(G[0]))
    best = 0.0
    rest = G[1:]
    n_rest = n_groups - 1
    chunk = 1 << 14
    for start in range(0, 1 << n_rest, chunk):
        codes = np.arange(start, min(start + chunk, 1 << n_rest))
        bits = (codes[:, None] >> np.arange(n_rest)) & 1
        Z = 1.0 - 2.0 * bits
        vals = np.linalg.norm(G[0][None, :] + Z @ rest, axis=1)
        best = max(best, float(vals.max()))
    return best


def g_c_functional(u, C: float, M: int, c: float, mode: str = "exact") -> float:
    """``(C / M^c) (||A(u)||_F^2 + max_z ||A(u)^T diag(z) v(u)||)``."""
    A, _ = _direction(u)
    return (C / M ** c) * (float(np.sum(A * A)) + box_max_term(u, mode))


def h_terms(u, eta_t: float, mode: str = "exact") -> dict:
    A, v = _direction(u)
    return {
        "frobenius_sq": float(np.sum(A * A)),
        "second_layer": math.sqrt(eta_t) * float(np.linalg.norm(v)),
        "box_max": box_max_term(u, mode),
    }


def h_functional(u, eta_t: float, mode: str = "exact") -> float:
    """``||A(u)||_F^2 + sqrt(eta t) ||v(u)|| + max_z ||A(u)^T diag(z) v(u)||``."""
    return math.fsum(h_terms(u, eta_t, mode).values())


def _difference(a: TwoLayerParams, b: TwoLayerParams):
    return (a.A - b.A, a.v - b.v)


def theorem_a1_quantities(ctx, params0: TwoLayerParams, w_star: TwoLayerParams, omega_star: TwoLayerParams,
                          eta_t: float, L_v_input: float | None = None, cov: CovarianceSummary | None = None,
                          mode: str = "exact") -> BoundReport:
    """Quantities of the structured two-layer test-error bound.

    ``w_star`` stands in for the empirical risk minimiser and
    ``omega_star`` for the population one.
    """
    if w_star is None or omega_star is None:
        raise ValueError("w_star and omega_star surrogates are required")
    cov = empirical_covariance(ctx.dataset) if cov is None else cov
    act, loss = ctx.activation, ctx.loss
    Mc = params0.M ** params0.c
    v0_inf = float(np.max(np.abs(params0.v)))
    vstar_inf = float(np.max(np.abs(omega_star.v)))
    drift = eta_t * loss.L_g_prime * act.L_sigma / Mc if eta_t > 0 else 0.0
    L_v_req = max(vstar_inf, v0_inf + drift)
    L_v = L_v_req if L_v_input is None else float(L_v_input)
    C_req = 2.0 * loss.L_g_prime * max(act.L_sigma_prime * math.sqrt(cov.trace),
                                       act.L_sigma_second * L_v * cov.spectral_norm)
    R0 = risk.empirical_risk(ctx, params0)
    Rs = risk.empirical_risk(ctx, w_star)
    gap = max(R0 - Rs, 0.0)
    lam = 3.0 * C_req * max(math.sqrt(gap), 1.0) / Mc
    opt = 3.0 * C_req * gap * eta_t / Mc
    H_diff = h_functional(_difference(omega_star, params0), eta_t, mode)
    H_star = h_functional((omega_star.A, omega_star.v), eta_t, mode)
    stat = lam * H_diff
    tw = total_weight(omega_star).value
    terms = {
        "L_v_required": L_v_req,
        "L_v": L_v,
        "C": C_req,
        "lambda": lam,
        "R0_minus_Rstar": gap,
        "opt_component": opt,
        "H_diff": H_diff,
        "stat_approx": stat,
        "H_omega_star": H_star,
        "sqrt_trace_H_over_Mc": math.sqrt(cov.trace) * H_star / Mc,
        "total_weight_omega_star": tw,
    }
    conditions = [_ge("L_v >= ||v*||_inf v (||v0||_inf + eta t Lg' Ls / M^c)", L_v, L_v_req)]
    return BoundReport("theorem_a1_quantities", opt + stat, terms, conditions)


@dataclass(frozen=True)
class MuRegion:
    mu: float
    vanishing_tw: bool
    vanishing_approx: bool
    region: str
    on_boundary: bool


def mu_region(A_star_frob: float, M: int, c: float, atol: float = 1e-12) -> MuRegion:
    """Classify ``(mu, c)`` where ``||A*||_F = M^(1/2 - mu)``.

    ``red``: Total Weight vanishes (mu > 1 - c). ``blue``: only the
    approximation error vanishes (mu > (1 - c) / 2). ``green``: neither.
    Comparisons are strict; ``on_boundary`` flags a tie within ``atol``.
    """
    if A_star_frob <= 0:
        raise ValueError("A_star_frob must be positive")
    if M < 2:
        raise ValueError("M must be at least 2")
    mu = 0.5 - math.log(A_star_frob) / math.log(M)
    tw = mu > 1.0 - c
    approx = mu > (1.0 - c) / 2.0
    region = "red" if tw else ("blue" if approx else "green")
    boundary = abs(mu - (1.0 - c)) <= atol or abs(mu - (1.0 - c) / 2.0) <= atol
    return MuRegion(mu, tw, approx, region, boundary)


# ---------------------------------------------------------------- decomposition

def decomposition_report(ctx_train, ctx_test, traj) -> BoundReport:
    """Empirical test-error split over the recorded iterates.

    With ``I`` uniform over the snapshots: ``total = E r(w_I) - r(best)``,
    ``gen = E r(w_I) - E R(w_I)`` and ``opt_approx = E R(w_I) - r(best)``,
    where ``best`` is the snapshot with the lowest held-out risk.
    """
    test = np.array([risk.population_risk_estimate(ctx_test, p) for _, p in traj.snapshots])
    train = np.array([risk.empirical_risk(ctx_train, p) for _, p in traj.snapshots])
    test_avg = math.fsum(test.tolist()) / test.size
    train_avg = math.fsum(train.tolist()) / train.size
    best = float(test.min())
    total = test_avg - best
    gen = test_avg - train_avg
    opt_approx = train_avg - best
    terms = {
        "test_avg": test_avg,
        "train_avg": train_avg,
        "best_test": best,
        "best_step": int(traj.snapshots[int(np.argmin(test))][0]),
        "gen": gen,
        "opt_approx": opt_approx,
    }
    return BoundReport("decomposition", total, terms)


def penalized_minimizer(ctx, params0, eps: float, eta: float, max_iters: int = 10_000, gtol: float = 1e-8):
    """GD surrogate for ``argmin R(w) + eps ||w0 - w||^2``; returns ``(params, grad_norm)``."""
    w0 = flatten(params0)
    w = w0.copy()
    params = params0
    gnorm = math.inf
    for _ in range(max_iters):
        g = risk.grad_R(ctx, params) + 2.0 * eps * (w - w0)
        gnorm = float(np.linalg.norm(g))
        if gnorm <= gtol:
            break
        w = w - eta * g
        params = params0.with_flat(w)
    return params, gnorm

