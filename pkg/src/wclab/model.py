"""Two- and three-layer prediction functions with analytic derivatives.

Parameters are flattened row-major: the trainable first layer ``A`` (the
entry ``A[j, k]`` sits at 0-based index ``j * d + k``, i.e. the 1-based
``(j-1)d + k``), followed by the output layer ``v`` when it is trained.
A three-layer network keeps its middle layer fixed and out of the flat vector.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    """Dimension mismatch between parameters, inputs or directions."""


# ---------------------------------------------------------------- activations

def _sigmoid_derivs(u, order):
    # sigma(u) = (1 + tanh(u/2)) / 2 keeps every derivative a polynomial in
    # one vectorised tanh, which is much cheaper than repeated exp calls
    t = np.tanh(0.5 * np.asarray(u, dtype=float))
    if order == 0:
        return 0.5 + 0.5 * t
    s1 = 0.25 * (1.0 - t * t)
    if order == 1:
        return s1
    if order == 2:
        return -s1 * t
    return s1 * (1.0 - 6.0 * s1)


def _tanh_derivs(u, order):
    t = np.tanh(u)
    if order == 0:
        return t
    sech2 = 1.0 - t * t
    if order == 1:
        return sech2
    if order == 2:
        return -2.0 * t * sech2
    return -2.0 * sech2 * (1.0 - 3.0 * t * t)


def _linear_derivs(u, order):
    u = np.asarray(u, dtype=float)
    if order == 0:
        return u
    if order == 1:
        return np.ones_like(u)
    return np.zeros_like(u)


_DERIVS = {"sigmoid": _sigmoid_derivs, "tanh": _tanh_derivs, "linear": _linear_derivs}


@functools.lru_cache(maxsize=None)
def grid_sup(kind: str, order: int, lo: float = -10.0, hi: float = 10.0, points: int = 10**7) -> float:
    """``max |sigma^(order)(u)|`` over an evenly spaced grid, chunked."""
    fn = _DERIVS[kind]
    best = 0.0
    chunk = 10**6
    for start in range(0, points, chunk):
        k = np.arange(start, min(start + chunk, points), dtype=float)
        u = lo + (hi - lo) * k / (points - 1)
        best = max(best, float(np.max(np.abs(fn(u, order)))))
    return best


@dataclass(frozen=True)
class Activation:
    """A smooth activation together with global bounds on it and its derivatives."""

    kind: str = "sigmoid"

    def __post_init__(self):
        if self.kind not in _DERIVS:
            raise ValueError(f"unknown activation {self.kind!r}; choose from {sorted(_DERIVS)}")

    def __call__(self, u):
        return _DERIVS[self.kind](u, 0)

    def d1(self, u):
        return _DERIVS[self.kind](u, 1)

    def value_and_d1(self, u):
        """``(sigma(u), sigma'(u))`` from a single transcendental evaluation."""
        if self.kind == "linear":
            return _linear_derivs(u, 0), _linear_derivs(u, 1)
        # in-place arithmetic: large temporaries dominate the cost otherwise
        if self.kind == "tanh":
            t = np.tanh(u)
            d = np.multiply(t, t)
            np.subtract(1.0, d, out=d)
            return t, d
        t = np.multiply(u, 0.5)
        np.tanh(t, out=t)
        d = np.multiply(t, t)
        np.subtract(1.0, d, out=d)
        d *= 0.25
        t *= 0.5
        t += 0.5
        return t, d

    def d2(self, u):
        return _DERIVS[self.kind](u, 2)

    def d3(self, u):
        return _DERIVS[self.kind](u, 3)

    @property
    def L_sigma(self) -> float:
        return math.inf if self.kind == "linear" else 1.0

    @property
    def L_sigma_prime(self) -> float:
        return {"sigmoid": 0.25, "tanh": 1.0, "linear": 1.0}[self.kind]

    @property
    def L_sigma_second(self) -> float:
        if self.kind == "linear":
            return 0.0
        return grid_sup(self.kind, 2)

    @property
    def L_sigma_third(self) -> float:
        if self.kind == "linear":
            return 0.0
        return grid_sup(self.kind, 3)


SIGMOID = Activation("sigmoid")


# ---------------------------------------------------------------- parameters

def _frozen(a, ndim, what):
    a = np.array(a, dtype=float)
    if a.ndim != ndim:
        raise ShapeError(f"{what} must be {ndim}-dimensional, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ShapeError(f"{what} has non-finite entries")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TwoLayerParams:
    """``f(x) = M**-c * sum_j v_j sigma(<A_j, x>)``."""

    A: np.ndarray
    v: np.ndarray
    c: float = 0.5
    train_second_layer: bool = True

    def __post_init__(self):
        A = _frozen(self.A, 2, "A")
        v = _frozen(self.v, 1, "v")
        if A.shape[0] < 1 or A.shape[1] < 1 or v.shape != (A.shape[0],):
            raise ShapeError(f"inconsistent shapes A{A.shape}, v{v.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "c", float(self.c))

    @property
    def M(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    @property
    def size(self) -> int:
        return self.M * self.d + (self.M if self.train_second_layer else 0)

    def with_flat(self, flat) -> "TwoLayerParams":
        return unflatten(flat, self)

    def __eq__(self, other):
        return (
            isinstance(other, TwoLayerParams)
            and self.c == other.c
            and self.train_second_layer == other.train_second_layer
            and np.array_equal(self.A, other.A)
            and np.array_equal(self.v, other.v)
        )


@dataclass(frozen=True, eq=False)
class ThreeLayerParams:
    """Linear first layer, fixed middle layer ``A2``, trainable output ``v``.

    ``f(x) = M2**-c * sum_i v_i sigma(M1**-c * sum_s A2[i, s] <A1_s, x>)``
    """

    A1: np.ndarray
    A2: np.ndarray
    v: np.ndarray
    c: float = 0.5

    def __post_init__(self):
        A1 = _frozen(self.A1, 2, "A1")
        A2 = _frozen(self.A2, 2, "A2")
        v = _frozen(self.v, 1, "v")
        if A2.shape[1] != A1.shape[0] or v.shape != (A2.shape[0],):
            raise ShapeError(f"inconsistent shapes A1{A1.shape}, A2{A2.shape}, v{v.shape}")
        object.__setattr__(self, "A1", A1)
        object.__setattr__(self, "A2", A2)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "c", float(self.c))

    @property
    def M1(self) -> int:
        return self.A1.shape[0]

    @property
    def M2(self) -> int:
        return self.A2.shape[0]

    @property
    def d(self) -> int:
        return self.A1.shape[1]

    @property
    def train_second_layer(self) -> bool:
        return True

    @property
    def size(self) -> int:
        return self.M1 * self.d + self.M2

    def with_flat(self, flat) -> "ThreeLayerParams":
        return unflatten(flat, self)

    def __eq__(self, other):
        return (
            isinstance(other, ThreeLayerParams)
            and self.c == other.c
            and np.array_equal(self.A1, other.A1)
            and np.array_equal(self.A2, other.A2)
            and np.array_equal(self.v, other.v)
        )


def flatten(params) -> np.ndarray:
    if isinstance(params, ThreeLayerParams):
        return np.concatenate([params.A1.ravel(), params.v])
    if params.train_second_layer:
        return np.concatenate([params.A.ravel(), params.v])
    return params.A.ravel().copy()


def unflatten(flat, like):
    """Inverse of :func:`flatten`; ``like`` supplies shapes and fixed parts."""
    flat = np.asarray(flat, dtype=float)
    if flat.shape != (like.size,):
        raise ShapeError(f"flat vector has shape {flat.shape}, expected ({like.size},)")
    if isinstance(like, ThreeLayerParams):
        k = like.M1 * like.d
        return ThreeLayerParams(flat[:k].reshape(like.M1, like.d), like.A2, flat[k:], like.c)
    k = like.M * like.d
    v = flat[k:] if like.train_second_layer else like.v
    return TwoLayerParams(flat[:k].reshape(like.M, like.d), v, like.c, like.train_second_layer)


# ---------------------------------------------------------------- kernels
#
# Both architectures share one computation: pre-activations
# H = s_in * (X A^T) B^T (B = identity and s_in = 1 for two layers), output
# s_out * sigma(H) v. Directions U are batched as (k, p).

@dataclass(frozen=True)
class _Net:
    A: np.ndarray
    B: np.ndarray | None
    v: np.ndarray
    s_in: float
    s_out: float
    train_v: bool

    @property
    def n_first(self):
        return self.A.size


def _net(params) -> _Net:
    if isinstance(params, ThreeLayerParams):
        return _Net(params.A1, params.A2, params.v, params.M1 ** -params.c, params.M2 ** -params.c, True)
    return _Net(params.A, None, params.v, 1.0, params.M ** -params.c, params.train_second_layer)


def _inner(net: _Net, P):
    """Map first-layer outputs ``P`` (..., M1) to pre-activations (..., M2)."""
    if net.B is None:
        return P
    return net.s_in * (P @ net.B.T)


@dataclass
class Features:
    """Per-sample activations reused across gradient and curvature calls.

    ``S2`` is only needed for curvature, so it is computed on first use.
    """

    H: np.ndarray
    S: np.ndarray
    S1: np.ndarray
    act: Activation = SIGMOID
    _S2: np.ndarray | None = None

    @property
    def S2(self) -> np.ndarray:
        if self._S2 is None:
            self._S2 = self.act.d2(self.H)
        return self._S2


def features(params, X, act: Activation = SIGMOID) -> Features:
    net = _net(params)
    H = _inner(net, X @ net.A.T)
    S, S1 = act.value_and_d1(H)
    return Features(H, S, S1, act)


def _check_X(params, x):
    x = np.asarray(x, dtype=float)
    d = params.d
    if x.shape[-1] != d or x.ndim not in (1, 2):
        raise ShapeError(f"input has shape {x.shape}, expected (..., {d})")
    return x


def _split(net: _Net, U):
    """Split a (k, p) direction batch into first-layer and output blocks."""
    k = U.shape[0]
    nA = net.n_first
    UA = U[:, :nA].reshape(k, *net.A.shape)
    Uv = U[:, nA:] if net.train_v else np.zeros((k, net.v.size))
    return UA, Uv


def _directional_preact(net: _Net, X, UA):
    """Change of pre-activations along first-layer directions: (k, n, M2)."""
    return _inner(net, np.einsum("nd,kmd->knm", X, UA))


def _pack(net: _Net, gA, gv):
    k = gA.shape[0]
    if net.train_v:
        return np.concatenate([gA.reshape(k, -1), gv], axis=1)
    return gA.reshape(k, -1)


def _first_layer_grad(net: _Net, coeff, X):
    """Map per-sample pre-activation coefficients (k, n, M2) to A-gradients."""
    if net.B is not None:
        coeff = net.s_in * (coeff @ net.B)  # (k, n, M1)
    return np.matmul(coeff.transpose(0, 2, 1), X)


def weighted_grad(params, X, feats: Features, W) -> np.ndarray:
    """``sum_i W[k, i] * grad f(x_i)`` for each row of ``W``: shape (k, p)."""
    net = _net(params)
    W = np.atleast_2d(W)
    coeff = feats.S1 * net.v
    coeff = coeff[None] * W[:, :, None] if W.shape[0] > 1 else np.multiply(coeff, W[0][:, None], out=coeff)[None]
    gA = net.s_out * _first_layer_grad(net, coeff, X)
    gv = net.s_out * (W @ feats.S)
    return _pack(net, gA, gv)


def jvp(params, X, feats: Features, U) -> np.ndarray:
    """``<U[k], grad f(x_i)>`` for a (k, p) batch of directions: shape (k, n)."""
    net = _net(params)
    UA, Uv = _split(net, U)
    D = _directional_preact(net, X, UA)
    out = np.einsum("knm,nm->kn", D, feats.S1 * net.v)
    if net.train_v:
        out = out + Uv @ feats.S.T
    return net.s_out * out


def weighted_hvp(params, X, feats: Features, w, U) -> np.ndarray:
    """``sum_i w_i * hess f(x_i) @ U[k]``: shape (k, p).

    The output-output block of the Hessian is zero, so only the first-layer
    curvature and the first/output cross terms contribute.
    """
    net = _net(params)
    UA, Uv = _split(net, U)
    D = _directional_preact(net, X, UA)  # (k, n, M2)
    w = np.asarray(w, dtype=float)
    T = (net.v * feats.S2)[None] * D
    if net.train_v:
        T = T + Uv[:, None, :] * feats.S1[None]
    gA = net.s_out * _first_layer_grad(net, w[None, :, None] * T, X)
    gv = net.s_out * np.einsum("n,knm->km", w, feats.S1[None] * D)
    return _pack(net, gA, gv)


# ---------------------------------------------------------------- public ops

def forward(params, x, act: Activation = SIGMOID):
    """Network output for one input (scalar) or a batch of rows (vector)."""
    x = _check_X(params, x)
    X = np.atleast_2d(x)
    net = _net(params)
    out = net.s_out * (act(_inner(net, X @ net.A.T)) @ net.v)
    return float(out[0]) if x.ndim == 1 else out


def grad_f(params, x, act: Activation = SIGMOID) -> np.ndarray:
    """Flat gradient of the output w.r.t. the trainable parameters.

    For a batch of inputs the result holds one gradient per row.
    """
    x = _check_X(params, x)
    X = np.atleast_2d(x)
    feats = features(params, X, act)
    G = weighted_grad(params, X, feats, np.eye(X.shape[0]))
    return G[0] if x.ndim == 1 else G


def hvp_f(params, x, u, act: Activation = SIGMOID) -> np.ndarray:
    """Hessian of the output at a single input applied to ``u``."""
    x = _check_X(params, x)
    if x.ndim != 1:
        raise ShapeError("hvp_f takes a single input vector")
    u = np.asarray(u, dtype=float)
    if u.shape != (params.size,):
        raise ShapeError(f"direction has shape {u.shape}, expected ({params.size},)")
    X = x[None]
    feats = features(params, X, act)
    return weighted_hvp(params, X, feats, np.ones(1), u[None])[0]


forward_three = forward
grad_f_three = grad_f
hvp_f_three = hvp_f


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(params: TwoLayerParams, path):
    """JSON checkpoint; ``repr`` floats round-trip bit-exactly."""
    doc = {
        "M": params.M,
        "d": params.d,
        "c": params.c,
        "train_second_layer": params.train_second_layer,
        "A": [float(a) for a in params.A.ravel()],
        "v": [float(b) for b in params.v],
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> TwoLayerParams:
    doc = json.loads(Path(path).read_text())
    A = np.array(doc["A"], dtype=float).reshape(doc["M"], doc["d"])
    return TwoLayerParams(A, np.array(doc["v"], dtype=float), doc["c"], doc["train_second_layer"])
