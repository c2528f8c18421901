"""Datasets: CSV ingestion, synthetic teacher networks, covariate covariance."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Activation, TwoLayerParams, forward


class DataError(ValueError):
    """Raised for malformed or inconsistent datasets."""


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise DataError(f"X must be a non-empty 2-d array, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise DataError(f"y must have length {X.shape[0]}, got shape {y.shape}")
        if not np.all(np.isfinite(X)):
            raise DataError("X contains non-finite entries")
        if not np.all((y == 1.0) | (y == -1.0)):
            raise DataError("labels must be exactly -1 or +1")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def __len__(self):
        return self.n

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()

    def subset(self, idx, name=None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.y[idx], name or self.name)

    def replace_point(self, i: int, x, y) -> "Dataset":
        """Copy of the dataset with sample ``i`` swapped for ``(x, y)``."""
        X = self.X.copy()
        Y = self.y.copy()
        X[i] = x
        Y[i] = y
        return Dataset(X, Y, self.name)

    def standardized(self) -> "Dataset":
        std = self.X.std(axis=0)
        std[std == 0] = 1.0
        return Dataset(self.X / std, self.y, self.name)


@dataclass(frozen=True)
class CovarianceSummary:
    sigma_hat: np.ndarray
    spectral_norm: float
    trace: float


@dataclass(frozen=True)
class TeacherSpec:
    M_star: int
    d: int
    mu: float
    c: float = 0.5
    seed: int = 0
    N_train: int = 100
    N_test: int = 1000
    label_noise: bool = False
    activation: str = "sigmoid"

    def validate(self):
        if not 0.0 <= self.mu <= 1.0:
            raise DataError(f"mu must lie in [0, 1], got {self.mu}")
        if not 0.5 <= self.c <= 1.0:
            raise DataError(f"c must lie in [1/2, 1], got {self.c}")
        if self.M_star < 1 or self.d < 1:
            raise DataError("M_star and d must be positive")
        if self.N_train < 1 or self.N_test < 1:
            raise DataError("N_train and N_test must be positive")


def _parse_float(text, row_no):
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"row {row_no}: cannot parse {text!r} as a number") from None
    if not np.isfinite(value):
        raise DataError(f"row {row_no}: non-finite value {text!r}")
    return value


def load_csv(path, label_column: int = -1, has_header: bool = False, name=None) -> Dataset:
    """Read a comma-separated file into a :class:`Dataset`.

    The label column may hold any two-valued coding; the smaller raw label
    (numeric order when every label parses as a number, otherwise string
    order) maps to -1 and the other to +1.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if any(cell.strip() for cell in r)]
    if has_header and rows:
        rows = rows[1:]
    if not rows:
        raise DataError(f"{path}: no data rows")

    width = len(rows[0])
    if width < 2:
        raise DataError(f"{path}: need at least one feature and one label column")
    col = label_column % width
    features, raw_labels = [], []
    offset = 2 if has_header else 1
    for k, row in enumerate(rows):
        row_no = k + offset
        if len(row) != width:
            raise DataError(f"row {row_no}: expected {width} fields, got {len(row)}")
        raw_labels.append(row[col].strip())
        features.append([_parse_float(cell, row_no) for j, cell in enumerate(row) if j != col])

    distinct = set(raw_labels)
    if len(distinct) > 2:
        raise DataError(f"{path}: more than two distinct labels: {sorted(distinct)[:5]}")
    try:
        numeric = {lab: float(lab) for lab in distinct}
        order = sorted(distinct, key=numeric.__getitem__)
    except ValueError:
        order = sorted(distinct)
    low = order[0]
    y = np.array([-1.0 if lab == low else 1.0 for lab in raw_labels])
    if len(distinct) == 1:
        # a single class still needs a definite coding; it is the "smaller" one
        y[:] = -1.0
    return Dataset(np.array(features, dtype=float), y, name or path.stem)


def write_csv(ds: Dataset, path, header: bool = False):
    """Write features then label per row; floats use shortest round-trip repr."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow([f"x{k}" for k in range(ds.d)] + ["y"])
        for x, y in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in x] + [str(int(y))])


def _row_covariance(W) -> CovarianceSummary:
    W = np.asarray(W, dtype=float)
    sigma = W.T @ W / W.shape[0]
    sigma = 0.5 * (sigma + sigma.T)
    top = np.linalg.eigvalsh(sigma)[-1]
    return CovarianceSummary(sigma, float(max(top, 0.0)), float(np.trace(sigma)))


def empirical_covariance(ds: Dataset) -> CovarianceSummary:
    """``X.T @ X / N`` with its spectral norm (dense eigensolve) and trace."""
    return _row_covariance(ds.X)


def covariance_of_rows(W) -> CovarianceSummary:
    """Same summary for an arbitrary matrix, e.g. a fixed middle layer."""
    return _row_covariance(W)


def subsample(ds: Dataset, n: int, seed: int) -> Dataset:
    """Seeded uniform subsample without replacement, original order kept."""
    if not 1 <= n <= ds.n:
        raise DataError(f"subsample size {n} outside [1, {ds.n}]")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(ds.n, size=n, replace=False))
    return ds.subset(idx)


@dataclass
class TeacherData:
    train: Dataset
    test: Dataset
    teacher: TwoLayerParams
    attempts: int = 1
    extra: dict = field(default_factory=dict)


def synth_teacher(spec: TeacherSpec) -> TeacherData:
    """Gaussian covariates labelled by a random two-layer teacher.

    The teacher's first layer is rescaled to Frobenius norm
    ``M_star ** (1/2 - mu)``; its second layer has entries of +-1.
    """
    spec.validate()
    target = float(spec.M_star) ** (0.5 - spec.mu)
    act = Activation(spec.activation)
    for attempt in range(10):
        rng = np.random.default_rng([spec.seed, attempt])
        A = rng.standard_normal((spec.M_star, spec.d))
        norm = np.linalg.norm(A)
        if norm > 0 and np.isfinite(norm):
            break
    else:
        raise DataError("teacher first layer degenerate after 10 attempts")
    A = A * (target / norm)
    v = rng.choice([-1.0, 1.0], size=spec.M_star)
    teacher = TwoLayerParams(A, v, c=spec.c, train_second_layer=True)

    n_total = spec.N_train + spec.N_test
    X = rng.standard_normal((n_total, spec.d))
    f = forward(teacher, X, act)
    if spec.label_noise:
        p = 0.5 * (1.0 + np.tanh(0.5 * f))
        y = np.where(rng.random(n_total) < p, 1.0, -1.0)
    else:
        y = np.where(f >= 0, 1.0, -1.0)
    train = Dataset(X[: spec.N_train], y[: spec.N_train], "teacher-train")
    test = Dataset(X[spec.N_train:], y[spec.N_train:], "teacher-test")
    return TeacherData(train, test, teacher, attempts=attempt + 1)
