"""RBF-kernel support vector machine baseline on flattened FC vectors."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.metrics.pairwise import rbf_kernel
from sklearn.svm import SVC

from braingraph_bench.errors import ConfigurationError, ContractError
from braingraph_bench.models import Prediction

logger = logging.getLogger(__name__)

KKT_TOLERANCE = 1e-3
# libsvm stops on the maximal violating pair; keep it well inside KKT_TOLERANCE
SOLVER_TOLERANCE = 1e-5


@dataclass(slots=True)
class SVMModel:
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i with y in {-1, +1}
    intercept: float
    gamma: float
    C: float
    support: np.ndarray

    @property
    def alphas(self) -> np.ndarray:
        return np.abs(self.dual_coef)

    @property
    def num_features(self) -> int:
        return self.support_vectors.shape[1]

    def to_parameters(self) -> dict[str, np.ndarray]:
        return {
            "svm.support_vectors": self.support_vectors,
            "svm.dual_coef": self.dual_coef,
            "svm.intercept": np.asarray(self.intercept),
            "svm.gamma": np.asarray(self.gamma),
            "svm.C": np.asarray(self.C),
            "svm.support": self.support.astype(np.float64),
        }

    @classmethod
    def from_parameters(cls, parameters: dict[str, np.ndarray]) -> "SVMModel":
        return cls(
            support_vectors=np.asarray(parameters["svm.support_vectors"], dtype=np.float64),
            dual_coef=np.asarray(parameters["svm.dual_coef"], dtype=np.float64),
            intercept=float(parameters["svm.intercept"]),
            gamma=float(parameters["svm.gamma"]),
            C=float(parameters["svm.C"]),
            support=np.asarray(parameters["svm.support"]).astype(np.int64),
        )


def _signed(labels: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(labels) == 1, 1.0, -1.0)


def svm_rbf_train(features: np.ndarray, labels: np.ndarray, C: float = 1.0, gamma: float | None = None) -> SVMModel:
    """Solve the soft-margin dual with libsvm's SMO; `gamma=None` means 1/P."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ContractError(f"features {features.shape} do not match {labels.shape[0]} labels")
    if features.shape[0] < 2:
        raise ConfigurationError("svm_rbf needs at least two training samples")
    if np.unique(labels).size < 2:
        raise ConfigurationError("svm_rbf needs both classes in the training set")
    if C <= 0:
        raise ConfigurationError(f"C must be positive, got {C}")
    gamma = 1.0 / features.shape[1] if gamma is None else float(gamma)
    if gamma <= 0:
        raise ConfigurationError(f"gamma must be positive, got {gamma}")

    solver = SVC(C=C, kernel="rbf", gamma=gamma, tol=SOLVER_TOLERANCE, shrinking=False)
    solver.fit(features, labels)
    model = SVMModel(
        support_vectors=solver.support_vectors_.copy(),
        dual_coef=solver.dual_coef_[0].copy(),
        intercept=float(solver.intercept_[0]),
        gamma=gamma,
        C=float(C),
        support=solver.support_.copy(),
    )
    logger.debug("svm_rbf fitted: %d support vectors, C=%g gamma=%g", len(model.support), C, gamma)
    return model


def decision_function(model: SVMModel, features: np.ndarray) -> np.ndarray:
    """sum_i alpha_i y_i k(sv_i, x) + b for each row of `features`."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != model.num_features:
        raise ContractError(f"svm expects {model.num_features} features, got {features.shape[1]}")
    kernel = rbf_kernel(features, model.support_vectors, gamma=model.gamma)
    return kernel @ model.dual_coef + model.intercept


def svm_rbf_predict(model: SVMModel, x: np.ndarray) -> Prediction:
    """Logistic link on the margin (slope 1); the hard label is the sign of the margin."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ContractError(f"svm_rbf_predict takes one feature vector, got shape {x.shape}")
    return Prediction.from_logit(float(decision_function(model, x)[0]))


def kkt_residuals(model: SVMModel, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample violation of the soft-margin KKT conditions.

    alpha = 0 needs y f(x) >= 1, 0 < alpha < C needs y f(x) = 1 and
    alpha = C needs y f(x) <= 1.
    """
    features = np.asarray(features, dtype=np.float64)
    y = _signed(labels)
    alphas = np.zeros(features.shape[0])
    alphas[model.support] = model.alphas
    margins = y * decision_function(model, features)

    at_upper = alphas >= model.C * (1.0 - 1e-9)
    at_zero = alphas <= model.C * 1e-12
    free = ~(at_upper | at_zero)
    residuals = np.zeros_like(margins)
    residuals[at_zero] = np.maximum(0.0, 1.0 - margins[at_zero])
    residuals[free] = np.abs(1.0 - margins[free])
    residuals[at_upper] = np.maximum(0.0, margins[at_upper] - 1.0)
    return residuals
