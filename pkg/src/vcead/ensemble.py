"""Stacking layer: per-sample features from the three base learners, the
combiner models, and random-search tuning.

Each sample maps to exactly three features, one per base learner:
the supervised classifier's logit margin (anomaly minus normal), the log
reconstruction error of the autoencoder, and the semi-supervised head's
anomaly probability.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .base import BaseEstimator
from .data import Sample
from .forest import ForestClassifier
from .metrics import auc as auc_score
from .nets import ModelBundle
from .svm import SvmClassifier
from .tensor import Tensor, no_grad

FEATURE_NAMES = ("logit_margin", "log_mse", "semi_prob")
LOG_MSE_FLOOR = 1e-12


@dataclass(frozen=True)
class FeatureVector:
    logit_margin: float
    log_mse: float
    semi_prob: float

    def as_array(self) -> np.ndarray:
        return np.array([self.logit_margin, self.log_mse, self.semi_prob])


def _require_trained(bundle: ModelBundle) -> None:
    untrained = [name for name, net in bundle.learners() if not net.trained]
    if untrained:
        raise ValueError(f"bundle has untrained learners: {untrained}")


def features_from_outputs(clf_logits: np.ndarray, recon: np.ndarray,
                          images: np.ndarray, semi_logits: np.ndarray) -> np.ndarray:
    """Assemble (n, 3) feature rows from raw learner outputs.

    log_mse is floored at ln(1e-12) so a perfect reconstruction still
    yields a finite feature.
    """
    margin = clf_logits[:, 1] - clf_logits[:, 0]
    mse = ((recon - images) ** 2).mean(axis=(1, 2, 3))
    log_mse = np.log(np.maximum(mse, LOG_MSE_FLOOR))
    semi_margin = semi_logits[:, 1] - semi_logits[:, 0]
    semi_prob = np.where(
        semi_margin >= 0,
        1.0 / (1.0 + np.exp(-np.abs(semi_margin))),
        np.exp(-np.abs(semi_margin)) / (1.0 + np.exp(-np.abs(semi_margin))))
    return np.stack([margin, log_mse, semi_prob], axis=1).astype(np.float64)


def _batch_features(bundle: ModelBundle, images: np.ndarray) -> np.ndarray:
    dtype = bundle.classifier.head.fc.weight.dtype
    x = Tensor(images.astype(dtype, copy=False))
    with no_grad():
        clf_logits = bundle.classifier(x).data
        recon = bundle.autoencoder(x).data
        _, semi_logits_t = bundle.semi(x)
    return features_from_outputs(clf_logits, recon, x.data, semi_logits_t.data)


def extract_features(bundle: ModelBundle, sample: Sample) -> FeatureVector:
    """Feature vector of one sample; deterministic, no augmentation."""
    _require_trained(bundle)
    row = _batch_features(bundle, sample.image[None])[0]
    if not np.isfinite(row).all():
        raise ValueError(f"extract_features: non-finite features {row}")
    return FeatureVector(*map(float, row))


def feature_matrix(bundle: ModelBundle, samples: Sequence[Sample],
                   batch_size: int = 64, threads: int = 1) -> np.ndarray:
    """(n, 3) feature rows for samples, in order.

    Batches may be evaluated by a thread pool; the bundle is read-only
    during extraction so results are independent of scheduling.
    """
    _require_trained(bundle)
    batches = [np.stack([s.image for s in samples[i:i + batch_size]])
               for i in range(0, len(samples), batch_size)]
    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda b: _batch_features(bundle, b), batches))
    else:
        rows = [_batch_features(bundle, b) for b in batches]
    out = np.concatenate(rows, axis=0) if rows else np.empty((0, 3))
    if not np.isfinite(out).all():
        raise ValueError("feature_matrix: non-finite features produced")
    return out


# ---------------------------------------------------------------------------
# random search

DEFAULT_RF_GRID = {
    "n_trees": [50, 100, 200],
    "max_depth": [4, 6, 8, 12, None],
    "min_leaf": [1, 2, 4],
    "features_per_split": [1, 2, 3],
}

DEFAULT_SVM_GRID = {
    "kernel": ["linear", "rbf"],
    "C": [0.1, 1.0, 10.0, 100.0],
    "gamma": [0.01, 0.1, 1.0, 10.0],
}


def fit_forest(features, labels, hyper: dict, seed: int = 0) -> ForestClassifier:
    return ForestClassifier(seed=seed, **hyper).fit(features, labels)


def fit_svm(features, labels, hyper: dict, seed: int = 0) -> SvmClassifier:
    return SvmClassifier(seed=seed, **hyper).fit(features, labels)


def _stratified_half(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask selecting a stratified 50% subset, at least one per class."""
    mask = np.zeros(len(labels), dtype=bool)
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        take = max(1, len(idx) // 2)
        mask[rng.permutation(idx)[:take]] = True
    return mask


def random_search(fit_fn: Callable, features, labels, grid: Dict[str, list],
                  n_draws: int = 50, seed: int = 0):
    """Tune hyperparameters on a held-out half, refit the winner on all rows.

    Each draw picks one value per grid key; the draw is fitted on the
    tuning-train half and scored by AUC on the tuning-validation half.
    Ties keep the earliest draw. Returns (best_hyper, fitted_model, log)
    where log lists every draw with its tuning AUC.
    """
    if n_draws < 1:
        raise ValueError(f"random_search: n_draws must be >= 1, got {n_draws}")
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("random_search: grid must have non-empty value lists")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    # tuning subset: stratified half of the provided rows, itself split
    # stratified 50:50 into a fit part and a scoring part
    subset = _stratified_half(labels, rng)
    sub_idx = np.flatnonzero(subset)
    fit_mask = _stratified_half(labels[sub_idx], rng)
    tune_fit = sub_idx[fit_mask]
    tune_val = sub_idx[~fit_mask]
    if labels[tune_val].sum() in (0, len(tune_val)):
        # tiny inputs can leave the scoring half single-class; fall back to
        # scoring on the whole tuning subset
        tune_fit = sub_idx
        tune_val = sub_idx

    keys = sorted(grid)
    best = None
    log: List[dict] = []
    for draw in range(n_draws):
        hyper = {k: grid[k][int(rng.integers(0, len(grid[k])))] for k in keys}
        model = fit_fn(features[tune_fit], labels[tune_fit], hyper, seed=seed)
        score = auc_score(model.anomaly_score(features[tune_val]), labels[tune_val])
        log.append({"draw": draw, "hyper": dict(hyper), "tuning_auc": score})
        if best is None or score > best[0]:
            best = (score, hyper)
    best_hyper = best[1]
    final_model = fit_fn(features, labels, best_hyper, seed=seed)
    return best_hyper, final_model, log


# ---------------------------------------------------------------------------
# stacked estimator and serialization


class StackedEnsemble(BaseEstimator):
    """phi(x) = H(f0, f1, f2): base-learner features into one combiner.

    The bundle is a constructor argument rather than fitted state: the
    base learners train separately (see vcead.train); fit here extracts
    features and tunes/fits only the combiner.
    """

    def __init__(self, bundle: Optional[ModelBundle] = None,
                 combiner: str = "rf", n_draws: int = 50, seed: int = 0,
                 grid: Optional[dict] = None, threads: int = 1):
        self.bundle = bundle
        self.combiner = combiner
        self.n_draws = n_draws
        self.seed = seed
        self.grid = grid
        self.threads = threads
        self.model_ = None

    def _fit_fn(self):
        if self.combiner == "rf":
            return fit_forest, DEFAULT_RF_GRID
        if self.combiner == "svm":
            return fit_svm, DEFAULT_SVM_GRID
        raise ValueError(f"StackedEnsemble: combiner must be rf or svm")

    def fit(self, samples: Sequence[Sample], labels=None) -> "StackedEnsemble":
        if self.bundle is None:
            raise ValueError("StackedEnsemble: a trained bundle is required")
        if labels is None:
            labels = [s.label for s in samples]
        y = np.asarray(labels, dtype=np.int64)
        X = feature_matrix(self.bundle, samples, threads=self.threads)
        fit_fn, default_grid = self._fit_fn()
        grid = self.grid if self.grid is not None else default_grid
        self.best_hyper_, self.model_, self.search_log_ = random_search(
            fit_fn, X, y, grid, n_draws=self.n_draws, seed=self.seed)
        return self

    def anomaly_score(self, samples: Sequence[Sample]) -> np.ndarray:
        X = feature_matrix(self.bundle, samples, threads=self.threads)
        return self.model_.anomaly_score(X)

    def predict(self, samples: Sequence[Sample]) -> np.ndarray:
        X = feature_matrix(self.bundle, samples, threads=self.threads)
        return self.model_.predict(X)


def save_model(path, model) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh)


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("kind") == "forest":
        return ForestClassifier.from_dict(obj)
    if obj.get("kind") == "svm":
        return SvmClassifier.from_dict(obj)
    raise ValueError(f"{path}: unknown model kind {obj.get('kind')!r}")


def write_feature_table(path, sample_ids: Sequence[str], features: np.ndarray,
                        labels: Sequence) -> None:
    """CSV feeding the scatter plots: sample_id, the 3 features, label."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", *FEATURE_NAMES, "label"])
        for sid, row, label in zip(sample_ids, features, labels):
            writer.writerow([sid, repr(float(row[0])), repr(float(row[1])),
                             repr(float(row[2])),
                             "" if label is None else int(label)])


def read_feature_table(path) -> Tuple[List[str], np.ndarray, List[Optional[int]]]:
    ids: List[str] = []
    rows: List[List[float]] = []
    labels: List[Optional[int]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["sample_id", *FEATURE_NAMES, "label"]:
            raise ValueError(f"{path}: unexpected feature table header {header}")
        for row in reader:
            ids.append(row[0])
            rows.append([float(row[1]), float(row[2]), float(row[3])])
            labels.append(int(row[4]) if row[4] != "" else None)
    return ids, np.asarray(rows, dtype=np.float64), labels
