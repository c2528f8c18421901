"""Weak convexity and algorithmic stability of gradient descent on small networks.

Submodules: ``data`` (datasets, teacher generator, covariance summaries),
``model`` (two- and three-layer networks with analytic derivatives), ``risk``
(logistic risk, gradients, Hessian-vector products), ``optimizer`` (full-batch
GD and paired resampled runs), ``spectral`` (smallest Hessian eigenvalue and
closed-form lower bounds), ``bounds`` (generalisation and test-error bound
evaluators), ``lab`` (composite experiments), ``estimators`` (scikit-learn
wrapper) and ``cli``.
"""

from .data import Dataset, TeacherSpec, synth_teacher
from .estimators import TwoLayerNetworkClassifier
from .model import Activation, ThreeLayerParams, TwoLayerParams
from .optimizer import GDConfig, Schedule, run_gd
from .risk import RiskContext

__version__ = "0.1.0"

__all__ = [
    "Activation", "Dataset", "GDConfig", "RiskContext", "Schedule", "TeacherSpec", "ThreeLayerParams",
    "TwoLayerNetworkClassifier", "TwoLayerParams", "run_gd", "synth_teacher", "__version__",
]
