"""Estimator plumbing: sklearn-style get_params/set_params and input checks.

Models in this package follow the scikit-learn estimator convention
(constructor keyword args are hyperparameters, ``fit`` returns ``self``,
fitted state uses trailing-underscore attributes) without depending on
scikit-learn itself; ``get_params``/``set_params`` make them clonable by
``sklearn.base.clone`` and usable inside pipelines.
"""

from __future__ import annotations

import inspect

import numpy as np


class NotFittedError(RuntimeError):
    """Predict was called before fit."""


class BaseEstimator:
    def get_params(self, deep: bool = True) -> dict:
        out = {}
        for name in self._param_names():
            out[name] = getattr(self, name)
        return out

    def set_params(self, **params) -> "BaseEstimator":
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(
                    f"invalid parameter {key!r} for {type(self).__name__}; "
                    f"valid: {sorted(valid)}")
            setattr(self, key, value)
        return self

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [n for n, p in sig.parameters.items()
                if n != "self" and p.kind != p.VAR_KEYWORD]

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in sorted(self.get_params().items()))
        return f"{type(self).__name__}({args})"


def check_is_fitted(estimator, attribute: str) -> None:
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted; call fit first")


def check_array(X, name: str = "X") -> np.ndarray:
    """Validate a 2-D finite float feature matrix."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D (n_samples, n_features), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} has no samples")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains NaN or infinite values")
    return X


def check_X_y(X, y):
    """Validate features plus a binary {0, 1} label vector."""
    X = check_array(X)
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise ValueError(
            f"y must be 1-D with {X.shape[0]} entries, got shape {y.shape}")
    y = y.astype(np.int64)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("y must contain only 0 (normal) and 1 (anomaly)")
    return X, y
