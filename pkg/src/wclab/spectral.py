"""Smallest Hessian eigenvalue: iterative estimates and closed-form lower bounds."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from . import risk
from .data import CovarianceSummary, covariance_of_rows, empirical_covariance
from .model import SIGMOID, Activation, ThreeLayerParams, TwoLayerParams

METHODS = ("lanczos", "shifted_power", "dense")


class NotSymmetricError(ValueError):
    """The supplied Hessian-vector oracle failed the symmetry probe."""


@dataclass(frozen=True)
class SpectralEstimate:
    lambda_min: float
    iterations_used: int
    residual_norm: float
    method: str
    converged: bool = True

    @property
    def epsilon(self) -> float:
        return max(0.0, -self.lambda_min)


def check_symmetric(hvp, p, rng, pairs=3, tol=1e-8):
    for _ in range(pairs):
        u = rng.standard_normal(p)
        w = rng.standard_normal(p)
        a = float(np.dot(hvp(u), w))
        b = float(np.dot(u, hvp(w)))
        if abs(a - b) > tol * max(1.0, abs(a), abs(b)):
            raise NotSymmetricError(f"<Hu, w> = {a!r} but <u, Hw> = {b!r}")


def _residual(hvp, x, lam):
    x = x / np.linalg.norm(x)
    return float(np.linalg.norm(hvp(x) - lam * x))


def _dense(hvp, p):
    H = np.column_stack([hvp(e) for e in np.eye(p)])
    vals, vecs = np.linalg.eigh(0.5 * (H + H.T))
    return float(vals[0]), vecs[:, 0]


def _norm_estimate(hvp, x, steps):
    est = 0.0
    for _ in range(steps):
        y = hvp(x)
        est = float(np.linalg.norm(y))
        if est == 0.0:
            return 0.0, x
        x = y / est
    return est, x


def _shifted_power(hvp, p, rng, tol, max_iters):
    x = rng.standard_normal(p)
    x /= np.linalg.norm(x)
    norm_est, _ = _norm_estimate(hvp, x.copy(), 20)
    mu = 1.1 * norm_est if norm_est > 0 else 1.0
    lam, res, it = 0.0, math.inf, 0
    for it in range(1, max_iters + 1):
        hx = hvp(x)
        lam = float(np.dot(x, hx))
        res = float(np.linalg.norm(hx - lam * x))
        if res <= tol * (1.0 + norm_est):
            break
        y = mu * x - hx
        ny = np.linalg.norm(y)
        if ny == 0.0:
            break
        x = y / ny
    return lam, x, it, norm_est


def lambda_min_estimate(hvp, p: int, tol: float = 1e-10, max_iters: int = 10_000, seed: int = 0,
                        method: str = "lanczos", check: bool = True) -> SpectralEstimate:
    """Smallest eigenvalue of the symmetric operator ``hvp`` on R^p.

    ``lanczos`` runs ARPACK on a matrix-free operator, ``shifted_power`` runs
    power iteration on ``mu I - H`` with ``mu`` at 1.1 times a 20-step
    estimate of ``||H||``, and ``dense`` materialises the matrix. The result
    reports ``||H x - lambda x||`` at the returned unit eigenvector; it counts
    as converged when that residual is at most ``tol * (1 + ||H||)``.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    rng = np.random.default_rng(seed)
    if check:
        check_symmetric(hvp, p, rng)
    if method == "dense" or (method == "lanczos" and p < 3):
        lam, x = _dense(hvp, p)
        return SpectralEstimate(lam, p, _residual(hvp, x, lam), "dense", True)
    if method == "shifted_power":
        lam, x, it, norm_est = _shifted_power(hvp, p, rng, tol, max_iters)
        res = _residual(hvp, x, lam)
        return SpectralEstimate(lam, it, res, method, res <= tol * (1.0 + norm_est))

    calls = [0]

    def matvec(x):
        calls[0] += 1
        return hvp(np.asarray(x, dtype=float).ravel())

    op = LinearOperator((p, p), matvec=matvec, dtype=float)
    v0 = rng.standard_normal(p)
    try:
        vals, vecs = eigsh(op, k=1, which="SA", tol=tol, maxiter=max_iters, v0=v0)
        lam, x, ok = float(vals[0]), vecs[:, 0], True
    except ArpackNoConvergence as exc:
        if len(exc.eigenvalues) == 0:
            return SpectralEstimate(math.nan, calls[0], math.inf, method, False)
        lam, x, ok = float(exc.eigenvalues[0]), exc.eigenvectors[:, 0], False
    res = _residual(hvp, x, lam)
    return SpectralEstimate(lam, calls[0], res, method, ok)


def risk_lambda_min(ctx, params, tol=1e-10, seed=0, method="lanczos") -> SpectralEstimate:
    """Smallest eigenvalue of the empirical risk Hessian at ``params``."""
    if method == "dense":
        vals = np.linalg.eigvalsh(risk.dense_hessian(ctx, params))
        return SpectralEstimate(float(vals[0]), params.size, 0.0, "dense", True)
    return lambda_min_estimate(lambda u: risk.hvp_R(ctx, params, u), params.size, tol=tol,
                               seed=seed, method=method)


# ---------------------------------------------------------------- closed forms

def two_layer_bound(params: TwoLayerParams, cov: CovarianceSummary, act: Activation = SIGMOID,
                    loss=risk.LOGISTIC) -> float:
    """Lower bound on the smallest eigenvalue of the two-layer risk Hessian.

    ``-(Lg' Ls'' ||v||_inf ||S|| + 2 Ls' Lg' sqrt(||S||)) / M^c``; the second
    term comes from the first/second layer cross block and is dropped when
    the second layer is held fixed.
    """
    S = cov.spectral_norm
    v_inf = float(np.max(np.abs(params.v)))
    Lg = loss.L_g_prime
    total = Lg * act.L_sigma_second * v_inf * S
    if params.train_second_layer:
        total += 2.0 * act.L_sigma_prime * Lg * math.sqrt(S)
    return -total / params.M ** params.c


def three_layer_bound(params: ThreeLayerParams, cov: CovarianceSummary, cov_A2: CovarianceSummary,
                      act: Activation = SIGMOID, loss=risk.LOGISTIC) -> float:
    """Lower bound on the smallest eigenvalue of the three-layer risk Hessian.

    ``cov_A2`` summarises ``A2^T A2 / M2`` for the fixed middle layer.
    """
    c = params.c
    M1, M2 = params.M1, params.M2
    S, SA = cov.spectral_norm, cov_A2.spectral_norm
    v_inf = float(np.max(np.abs(params.v)))
    Lg = loss.L_g_prime
    curv = act.L_sigma_second * Lg * S * SA * v_inf / (M1 ** (2 * c) * M2 ** (c - 1))
    cross = 2.0 * Lg * act.L_sigma_prime * math.sqrt(S * SA) / (M2 ** (c - 0.5) * M1 ** c)
    return -(curv + cross)


def closed_form_bound(params, cov, act=SIGMOID, loss=risk.LOGISTIC, cov_A2=None) -> float:
    if isinstance(params, ThreeLayerParams):
        if cov_A2 is None:
            cov_A2 = covariance_of_rows(params.A2)
        return three_layer_bound(params, cov, cov_A2, act, loss)
    return two_layer_bound(params, cov, act, loss)


# ---------------------------------------------------------------- trajectories

@dataclass(frozen=True)
class EpsilonPoint:
    step: int
    lambda_min: float
    epsilon: float
    closed_form_bound: float
    residual_norm: float


def epsilon_trajectory(ctx, traj, tol: float = 1e-10, method: str = "lanczos", seed: int = 0):
    """``eps_s = max(0, -lambda_min)`` at every snapshot of ``traj``."""
    cov = empirical_covariance(ctx.dataset)
    out = []
    for step, params in traj.snapshots:
        est = risk_lambda_min(ctx, params, tol=tol, seed=seed, method=method)
        bound = closed_form_bound(params, cov, ctx.activation, ctx.loss)
        out.append(EpsilonPoint(step, est.lambda_min, est.epsilon, bound, est.residual_norm))
    return out


def interpolate_eps(steps, eps, t: int) -> np.ndarray:
    """Per-step ``eps`` for steps ``0..t-1`` from snapshot values.

    Between two snapshots the larger neighbour is used, which never
    understates the curvature seen by the bound.
    """
    steps = np.asarray(steps, dtype=int)
    eps = np.asarray(eps, dtype=float)
    if steps.size == 0:
        raise ValueError("no snapshots")
    order = np.argsort(steps)
    steps, eps = steps[order], eps[order]
    out = np.empty(t)
    for s in range(t):
        k = np.searchsorted(steps, s)
        if k < steps.size and steps[k] == s:
            out[s] = eps[k]
        else:
            lo = eps[max(k - 1, 0)]
            hi = eps[min(k, steps.size - 1)]
            out[s] = max(lo, hi)
    return out


def write_spectrum_csv(points, path):
    cols = ["step", "lambda_min", "epsilon_s", "closed_form_bound", "residual_norm"]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for p in points:
            w.writerow([p.step, repr(p.lambda_min), repr(p.epsilon), repr(p.closed_form_bound),
                        repr(p.residual_norm)])
