"""Composed loss ``g(f(x, w), y)``, empirical risk and its derivatives.

The risk Hessian splits into a Gauss-Newton part
``(1/N) sum g'' <u, grad f> grad f`` (positive semi-definite, since ``g`` is
convex) and a residual part ``(1/N) sum g' hess f @ u`` that carries every
negative eigenvalue. Sample indices are 0-based throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import Dataset
from .model import SIGMOID, Activation, ShapeError, TwoLayerParams, features, jvp, weighted_grad, weighted_hvp

DENSE_GUARD = 2000


@dataclass(frozen=True)
class LossFn:
    """Logistic loss ``log(1 + exp(-y * yhat))`` and its derivatives in ``yhat``."""

    kind: str = "logistic"

    def __post_init__(self):
        if self.kind != "logistic":
            raise ValueError(f"unsupported loss {self.kind!r}")

    def value(self, yhat, y):
        # logaddexp is the overflow-free softplus
        return np.logaddexp(0.0, -np.asarray(y) * np.asarray(yhat))

    def d1(self, yhat, y):
        y = np.asarray(y, dtype=float)
        return -y * expit(-y * np.asarray(yhat))

    def d2(self, yhat, y):
        t = np.asarray(y) * np.asarray(yhat)
        return expit(t) * expit(-t)

    def d3(self, yhat, y):
        y = np.asarray(y, dtype=float)
        t = y * np.asarray(yhat)
        s = expit(t)
        return y * s * (1.0 - s) * (1.0 - 2.0 * s)

    @property
    def L_g_prime(self) -> float:
        return 1.0

    @property
    def g2_max(self) -> float:
        return 0.25

    @property
    def g3_max(self) -> float:
        return 1.0 / (6.0 * math.sqrt(3.0))


LOGISTIC = LossFn()


@dataclass(frozen=True)
class RiskContext:
    dataset: Dataset
    loss: LossFn = field(default_factory=LossFn)
    activation: Activation = SIGMOID

    @property
    def X(self):
        return self.dataset.X

    @property
    def y(self):
        return self.dataset.y

    @property
    def N(self) -> int:
        return self.dataset.n

    def with_dataset(self, ds: Dataset) -> "RiskContext":
        return RiskContext(ds, self.loss, self.activation)


def _check_params(ctx: RiskContext, params):
    if params.d != ctx.dataset.d:
        raise ShapeError(f"parameters expect d={params.d}, dataset has d={ctx.dataset.d}")


def _outputs(ctx, params, X=None):
    X = ctx.X if X is None else X
    feats = features(params, X, ctx.activation)
    net_out = feats.S @ params.v
    scale = _out_scale(params)
    return feats, scale * net_out


def _out_scale(params):
    M_out = params.M2 if hasattr(params, "M2") else params.M
    return M_out ** -params.c


def _check_index(ctx, i):
    if not 0 <= i < ctx.N:
        raise IndexError(f"sample index {i} outside [0, {ctx.N})")


def per_sample_losses(ctx: RiskContext, params) -> np.ndarray:
    _check_params(ctx, params)
    _, f = _outputs(ctx, params)
    return ctx.loss.value(f, ctx.y)


def loss_at(ctx: RiskContext, params, i: int) -> float:
    _check_index(ctx, i)
    return float(per_sample_losses(ctx, params)[i])


def empirical_risk(ctx: RiskContext, params) -> float:
    return float(np.mean(per_sample_losses(ctx, params)))


def population_risk_estimate(ctx_test: RiskContext, params) -> float:
    """Held-out average loss, the usual stand-in for the population risk."""
    if ctx_test.N < 1:
        raise ValueError("test set is empty")
    return empirical_risk(ctx_test, params)


def value_and_grad(ctx: RiskContext, params):
    """``(R(w), grad R(w))`` sharing one forward pass."""
    _check_params(ctx, params)
    feats, f = _outputs(ctx, params)
    R = float(np.mean(ctx.loss.value(f, ctx.y)))
    w = ctx.loss.d1(f, ctx.y) / ctx.N
    return R, weighted_grad(params, ctx.X, feats, w)[0]


def grad_R(ctx: RiskContext, params) -> np.ndarray:
    return value_and_grad(ctx, params)[1]


def per_sample_grads(ctx: RiskContext, params) -> np.ndarray:
    """Rows are ``grad l(w, Z_i)``: shape (N, p)."""
    _check_params(ctx, params)
    feats, f = _outputs(ctx, params)
    W = np.diag(ctx.loss.d1(f, ctx.y))
    return weighted_grad(params, ctx.X, feats, W)


def point_grad(ctx: RiskContext, params, x, y) -> np.ndarray:
    """``grad l(w, (x, y))`` for a point that need not be in the dataset."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    feats, f = _outputs(ctx, params, X)
    w = ctx.loss.d1(f, np.array([float(y)]))
    return weighted_grad(params, X, feats, w)[0]


def point_loss(ctx: RiskContext, params, x, y) -> float:
    X = np.atleast_2d(np.asarray(x, dtype=float))
    _, f = _outputs(ctx, params, X)
    return float(ctx.loss.value(f, float(y))[0])


def grad_R_resampled(ctx: RiskContext, params, i: int, z_prime) -> np.ndarray:
    """Gradient of the risk with sample ``i`` replaced by ``z_prime = (x, y)``.

    Computed from the identity ``grad R + (grad l(w, z') - grad l(w, Z_i)) / N``.
    """
    _check_index(ctx, i)
    x_new, y_new = z_prime
    g = grad_R(ctx, params)
    d_new = point_grad(ctx, params, x_new, y_new)
    d_old = point_grad(ctx, params, ctx.X[i], ctx.y[i])
    return g + (d_new - d_old) / ctx.N


def hvp_R(ctx: RiskContext, params, u, part: str = "full") -> np.ndarray:
    """Risk Hessian (or one of its two parts) applied to ``u``.

    ``u`` may be a single flat direction or a (k, p) batch of them.
    ``part`` is ``"full"``, ``"gn"`` (Gauss-Newton) or ``"residual"``.
    """
    if part not in ("full", "gn", "residual"):
        raise ValueError(f"part must be full, gn or residual, got {part!r}")
    _check_params(ctx, params)
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    U = np.atleast_2d(u)
    if U.shape[1] != params.size:
        raise ShapeError(f"direction length {U.shape[1]} != parameter count {params.size}")
    feats, f = _outputs(ctx, params)
    out = np.zeros_like(U)
    if part in ("full", "gn"):
        J = jvp(params, ctx.X, feats, U)  # (k, N)
        out += weighted_grad(params, ctx.X, feats, J * (ctx.loss.d2(f, ctx.y) / ctx.N))
    if part in ("full", "residual"):
        out += weighted_hvp(params, ctx.X, feats, ctx.loss.d1(f, ctx.y) / ctx.N, U)
    return out[0] if single else out


def _dense_from_hvp(apply, p, chunk=256):
    H = np.empty((p, p))
    for start in range(0, p, chunk):
        stop = min(start + chunk, p)
        E = np.zeros((stop - start, p))
        E[np.arange(stop - start), np.arange(start, stop)] = 1.0
        H[:, start:stop] = apply(E).T
    return H


def dense_hessian(ctx: RiskContext, params, part: str = "full") -> np.ndarray:
    """Dense ``p x p`` risk Hessian assembled column by column from :func:`hvp_R`."""
    p = params.size
    if p > DENSE_GUARD:
        raise ValueError(f"dense Hessian needs p <= {DENSE_GUARD}, got p={p}")
    return _dense_from_hvp(lambda E: hvp_R(ctx, params, E, part), p)


def sample_hessian(ctx: RiskContext, params, i: int) -> np.ndarray:
    """Dense Hessian of the single loss ``l(w, Z_i)``."""
    _check_index(ctx, i)
    one = ctx.with_dataset(ctx.dataset.subset([i]))
    return dense_hessian(one, params)


def risk_fn(ctx: RiskContext, like):
    """Risk as a function of the flat parameter vector (for finite differences)."""
    return lambda w: empirical_risk(ctx, like.with_flat(w))


__all__ = [
    "LossFn", "LOGISTIC", "RiskContext", "DENSE_GUARD", "loss_at", "per_sample_losses",
    "empirical_risk", "population_risk_estimate", "value_and_grad", "grad_R",
    "per_sample_grads", "point_grad", "point_loss", "grad_R_resampled", "hvp_R",
    "dense_hessian", "sample_hessian", "risk_fn", "FusedTwoLayer",
]


class FusedTwoLayer:
    """Risk value and gradient for a two-layer network with reused buffers.

    Gradient descent calls this thousands of times on the same data; writing
    into two preallocated ``N x M`` work arrays avoids the allocation churn
    that otherwise dominates the step cost at widths in the thousands.
    """

    def __init__(self, ctx: RiskContext, like: TwoLayerParams):
        if not isinstance(like, TwoLayerParams) or ctx.activation.kind not in ("sigmoid", "tanh"):
            raise ValueError("fused kernel needs a two-layer sigmoid or tanh network")
        _check_params(ctx, like)
        self.ctx = ctx
        self.like = like
        self.X = np.ascontiguousarray(ctx.X)
        self._P = np.empty((ctx.N, like.M))
        self._D = np.empty((ctx.N, like.M))
        self._scale = like.M ** -like.c

    @staticmethod
    def supports(ctx: RiskContext, params) -> bool:
        return isinstance(params, TwoLayerParams) and ctx.activation.kind in ("sigmoid", "tanh")

    def value_and_grad(self, params: TwoLayerParams):
        # With t = tanh(a h) the derivative is k (1 - t^2), so
        #   grad_A = s k v_j [sum_n w_n x_n - sum_n w_n t_nj^2 x_n]
        # and only two elementwise passes over the N x M array remain.
        X, P, D, s_out = self.X, self._P, self._D, self._scale
        v = params.v
        sigmoid = self.ctx.activation.kind == "sigmoid"
        a, k = (0.5, 0.25) if sigmoid else (1.0, 1.0)
        np.matmul(X, (a * params.A).T, out=P)
        np.tanh(P, out=P)
        tv = P @ v
        f = s_out * (0.5 * (v.sum() + tv) if sigmoid else tv)
        y = self.ctx.y
        loss = self.ctx.loss
        R = float(np.mean(loss.value(f, y)))
        w = loss.d1(f, y) / self.ctx.N
        WX = X * w[:, None]
        np.multiply(P, P, out=D)
        gA = (s_out * k) * v[:, None] * (WX.sum(axis=0)[None, :] - D.T @ WX)
        if not params.train_second_layer:
            return R, gA.ravel()
        tw = P.T @ w
        gv = s_out * (0.5 * (w.sum() + tw) if sigmoid else tw)
        return R, np.concatenate([gA.ravel(), gv])
