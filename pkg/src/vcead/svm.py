"""Soft-margin SVM trained by maximal-violating-pair dual ascent (SMO style).

Features are z-scored with statistics stored on the model, so callers pass
raw feature rows at both fit and predict time. The decision value is the
signed kernel expansion; ties at exactly 0 classify as anomaly.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .base import BaseEstimator, check_array, check_X_y, check_is_fitted

_ALPHA_EPS = 1e-10


def _kernel(kind: str, gamma: float, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    if kind == "linear":
        return A @ B.T
    if kind == "rbf":
        sq = (np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :]
              - 2.0 * (A @ B.T))
        return np.exp(-gamma * np.maximum(sq, 0.0))
    raise ValueError(f"unknown kernel {kind!r}; use 'linear' or 'rbf'")


class SvmClassifier(BaseEstimator):
    """Binary SVM; solves the dual to KKT tolerance ``tol`` (default 1e-3).

    The solver deterministically picks the maximal violating pair each
    iteration, so results do not depend on ``seed``; the parameter exists
    for interface uniformity with the other combiners.
    """

    def __init__(self, kernel: str = "rbf", C: float = 1.0, gamma: float = 1.0,
                 tol: float = 1e-3, max_iter: int = 100_000, seed: int = 0):
        self.kernel = kernel
        self.C = C
        self.gamma = gamma
        self.tol = tol
        self.max_iter = max_iter
        self.seed = seed
        self.support_vectors_: Optional[np.ndarray] = None

    def fit(self, X, y) -> "SvmClassifier":
        X, y = check_X_y(X, y)
        if self.C <= 0:
            raise ValueError(f"SvmClassifier: C must be positive, got {self.C}")
        if self.kernel == "rbf" and self.gamma <= 0:
            raise ValueError(
                f"SvmClassifier: gamma must be positive, got {self.gamma}")
        if self.kernel not in ("linear", "rbf"):
            raise ValueError(f"SvmClassifier: unknown kernel {self.kernel!r}")
        if y.sum() == 0 or y.sum() == len(y):
            raise ValueError("SvmClassifier: both classes must be present")

        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.std_ = np.where(std < 1e-12, 1.0, std)
        Z = (X - self.mean_) / self.std_
        s = np.where(y == 1, 1.0, -1.0)
        n = len(y)
        C = float(self.C)
        K = _kernel(self.kernel, self.gamma, Z, Z)

        alpha = np.zeros(n)
        g = np.ones(n)
        upper = np.where(s > 0, C, 0.0)   # bound on s_i * alpha_i from above
        lower = np.where(s > 0, 0.0, -C)  # ... and below
        for _ in range(self.max_iter):
            sa = s * alpha
            sg = s * g
            up_mask = sa < upper - _ALPHA_EPS
            low_mask = sa > lower + _ALPHA_EPS
            i = int(np.argmax(np.where(up_mask, sg, -np.inf)))
            j = int(np.argmin(np.where(low_mask, sg, np.inf)))
            gap = sg[i] - sg[j]
            if gap <= self.tol:
                break
            denom = max(K[i, i] + K[j, j] - 2.0 * K[i, j], 1e-12)
            lam = min(upper[i] - sa[i], sa[j] - lower[j], gap / denom)
            alpha[i] += s[i] * lam
            alpha[j] -= s[j] * lam
            g += lam * s * (K[j] - K[i])

        # bias from the final violating-pair values
        sa = s * alpha
        sg = s * g
        up_vals = np.where(sa < upper - _ALPHA_EPS, sg, -np.inf)
        low_vals = np.where(sa > lower + _ALPHA_EPS, sg, np.inf)
        self.bias_ = 0.5 * (np.max(up_vals) + np.min(low_vals))

        sv = alpha > _ALPHA_EPS
        self.support_vectors_ = Z[sv].copy()
        self.dual_coef_ = (alpha * s)[sv].copy()
        return self

    def decision_function(self, X) -> np.ndarray:
        """Signed decision value; positive means anomaly."""
        check_is_fitted(self, "support_vectors_")
        X = check_array(X)
        Z = (X - self.mean_) / self.std_
        if len(self.support_vectors_) == 0:
            return np.full(len(Z), self.bias_)
        K = _kernel(self.kernel, self.gamma, Z, self.support_vectors_)
        return K @ self.dual_coef_ + self.bias_

    # uniform scoring surface shared with ForestClassifier
    anomaly_score = decision_function

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) >= 0.0).astype(np.int64)

    def to_dict(self) -> dict:
        check_is_fitted(self, "support_vectors_")
        return {
            "kind": "svm",
            "kernel": self.kernel,
            "C": self.C,
            "gamma": self.gamma,
            "tol": self.tol,
            "max_iter": self.max_iter,
            "seed": self.seed,
            "mean": self.mean_.tolist(),
            "std": self.std_.tolist(),
            "support_vectors": self.support_vectors_.tolist(),
            "dual_coef": self.dual_coef_.tolist(),
            "bias": float(self.bias_),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "SvmClassifier":
        model = cls(kernel=obj["kernel"], C=obj["C"], gamma=obj["gamma"],
                    tol=obj["tol"], max_iter=obj["max_iter"], seed=obj["seed"])
        model.mean_ = np.asarray(obj["mean"], dtype=np.float64)
        model.std_ = np.asarray(obj["std"], dtype=np.float64)
        model.support_vectors_ = np.asarray(obj["support_vectors"],
                                            dtype=np.float64).reshape(
            -1, len(obj["mean"]))
        model.dual_coef_ = np.asarray(obj["dual_coef"], dtype=np.float64)
        model.bias_ = float(obj["bias"])
        return model
