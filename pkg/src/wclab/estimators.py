"""scikit-learn compatible wrapper around the two-layer network and GD trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import risk, spectral
from .data import Dataset
from .model import Activation, forward
from .optimizer import GDConfig, Schedule, run_gd


class TwoLayerNetworkClassifier(ClassifierMixin, BaseEstimator):
    """Binary classifier ``f(x) = M^-c sum_j v_j sigma(<A_j, x>)`` trained by full-batch GD.

    The logistic loss is minimised with a constant step size. When
    ``early_stopping`` is set, a ``validation_fraction`` slice of the
    training data is held out and monitored every ``eval_every`` steps;
    the parameters at the last step are kept either way.

    After ``fit`` the estimator exposes ``classes_``, ``params_`` (a
    ``TwoLayerParams``), ``trajectory_`` and ``n_iter_``.
    """

    def __init__(self, M=16, c=0.5, eta=0.1, t_max=1000, train_second_layer=True,
                 activation="sigmoid", v_scale=1.0, early_stopping=False, validation_fraction=0.2,
                 eval_every=50, patience=5, random_state=0):
        self.M = M
        self.c = c
        self.eta = eta
        self.t_max = t_max
        self.train_second_layer = train_second_layer
        self.activation = activation
        self.v_scale = v_scale
        self.early_stopping = early_stopping
        self.validation_fraction = validation_fraction
        self.eval_every = eval_every
        self.patience = patience
        self.random_state = random_state

    def _validate_hyperparams(self):
        if int(self.M) < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if not 0.5 <= float(self.c) <= 1.0:
            raise ValueError(f"c must lie in [0.5, 1], got {self.c}")
        if not float(self.eta) > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.early_stopping and not 0.0 < float(self.validation_fraction) < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")

    def _signed(self, y):
        return np.where(y == self.classes_[1], 1.0, -1.0)

    def fit(self, X, y):
        self._validate_hyperparams()
        X, y = check_X_y(X, y, dtype=float)
        self.classes_ = unique_labels(y)
        if len(self.classes_) != 2:
            raise ValueError(f"expected exactly two classes, got {len(self.classes_)}")
        self.n_features_in_ = X.shape[1]
        ys = self._signed(y)
        seed = 0 if self.random_state is None else int(self.random_state)
        act = Activation(self.activation)

        ctx_test = None
        if self.early_stopping:
            rng = np.random.default_rng(seed)
            order = rng.permutation(X.shape[0])
            n_val = max(1, int(round(self.validation_fraction * X.shape[0])))
            if n_val >= X.shape[0]:
                raise ValueError("validation split leaves no training data")
            val, tr = order[:n_val], order[n_val:]
            ctx_test = risk.RiskContext(Dataset(X[val], ys[val]), activation=act)
            X, ys = X[tr], ys[tr]
        ctx = risk.RiskContext(Dataset(X, ys), activation=act)

        cfg = GDConfig(Schedule.constant(self.eta), int(self.t_max), M=int(self.M), c=float(self.c),
                       train_second_layer=bool(self.train_second_layer), seed=seed,
                       v_scale=float(self.v_scale), early_stopping=bool(self.early_stopping),
                       eval_every=int(self.eval_every), patience=int(self.patience))
        self.trajectory_ = run_gd(ctx, ctx_test, cfg)
        self.params_ = self.trajectory_.final_params
        self.n_iter_ = self.trajectory_.steps_run
        self._ctx = ctx
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return np.asarray(forward(self.params_, X, Activation(self.activation)), dtype=float)

    def predict_proba(self, X):
        f = self.decision_function(X)
        p1 = 0.5 * (1.0 + np.tanh(0.5 * f))
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X):
        f = self.decision_function(X)
        return self.classes_[(f > 0).astype(int)]

    def hessian_lambda_min(self, method="lanczos", tol=1e-10):
        """Smallest eigenvalue of the training-risk Hessian at the fitted parameters."""
        check_is_fitted(self, "params_")
        return spectral.risk_lambda_min(self._ctx, self.params_, tol=tol, method=method)
