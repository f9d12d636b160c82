"""Losses and the three training procedures (supervised, unsupervised,
semi-supervised), all driven by one Adam configuration.

Training is deterministic given (seed, config, data): batch order and
augmentation draws derive from per-epoch seeded generators, and weight
updates are strictly sequential.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .data import ANOMALY, NORMAL, AugmentPolicy, Sample, augment, weighted_sampler
from .metrics import auc as auc_score
from .nets import ModelBundle
from .optim import Adam
from .tensor import ShapeError, Tensor, backward, clamp, log, narrow, no_grad, sigmoid

CE_EPS = 1e-7


def mse_loss(y: Tensor, y_hat: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if y.shape != y_hat.shape:
        raise ShapeError(f"mse_loss: shape mismatch {y.shape} vs {y_hat.shape}")
    return ((y - y_hat) ** 2).mean()


def ce_loss(y, p: Tensor) -> Tensor:
    """Binary cross-entropy of anomaly probabilities against {0,1} labels.

    Probabilities are clamped to [eps, 1-eps] so log never sees 0.
    """
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y), dtype=p.dtype)
    if y.shape != p.shape:
        raise ShapeError(f"ce_loss: shape mismatch {y.shape} vs {p.shape}")
    p = clamp(p, CE_EPS, 1.0 - CE_EPS)
    return -((y * log(p) + (1.0 - y) * log(1.0 - p)).mean())


def anomaly_probability(logits: Tensor) -> Tensor:
    """Softmax anomaly probability of (N, 2) logits as sigmoid of the margin."""
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ShapeError(f"anomaly_probability: expected (N, 2) logits, got {logits.shape}")
    n = logits.shape[0]
    margin = narrow(logits, 1, 1, 1) - narrow(logits, 1, 0, 1)
    return sigmoid(margin.reshape(n))


@dataclass
class TrainConfig:
    epochs: int = 15
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    precision: str = "f32"
    seed: int = 0
    augment: AugmentPolicy = field(default_factory=AugmentPolicy.default_train)
    sampler: str = "weighted"  # classifier only: weighted | uniform
    semi_weight: float = 1.0   # semi only: weight of the supervised term

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"TrainConfig: epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(
                f"TrainConfig: batch_size must be >= 1, got {self.batch_size}")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"TrainConfig: precision must be f32 or f64")
        if self.sampler not in ("weighted", "uniform"):
            raise ValueError(f"TrainConfig: sampler must be weighted or uniform")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def as_dict(self) -> dict:
        return {
            "epochs": self.epochs, "lr": self.lr, "betas": list(self.betas),
            "eps": self.eps, "batch_size": self.batch_size,
            "precision": self.precision, "seed": self.seed,
            "augment": self.augment.as_dict(), "sampler": self.sampler,
            "semi_weight": self.semi_weight,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        kwargs = dict(obj)
        if "betas" in kwargs:
            kwargs["betas"] = tuple(kwargs["betas"])
        if "augment" in kwargs and isinstance(kwargs["augment"], dict):
            kwargs["augment"] = AugmentPolicy.from_dict(kwargs["augment"])
        return cls(**kwargs)


@dataclass
class TrainReport:
    learner: str
    epoch_losses: List[float]
    val_metrics: List[dict]
    wall_time_s: float
    checkpoint_path: Optional[str]
    config: dict

    def as_dict(self) -> dict:
        return {
            "learner": self.learner,
            "epoch_losses": self.epoch_losses,
            "val_metrics": self.val_metrics,
            "wall_time_s": self.wall_time_s,
            "checkpoint_path": self.checkpoint_path,
            "config": self.config,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.as_dict(), indent=indent)


def _epoch_rngs(seed: int, epoch: int):
    order_rng = np.random.default_rng([seed, epoch, 0])
    aug_rng = np.random.default_rng([seed, epoch, 1])
    return order_rng, aug_rng


def _stack_batch(samples: Sequence[Sample], idxs: Sequence[int],
                 policy: AugmentPolicy, aug_rng: np.random.Generator,
                 dtype) -> np.ndarray:
    imgs = []
    for i in idxs:
        s = samples[i]
        if policy.enabled():
            s = augment(s, policy, aug_rng)
        imgs.append(s.image)
    return np.stack(imgs).astype(dtype, copy=False)


def _batch_slices(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def predict_batched(net_fn, samples: Sequence[Sample], batch_size: int = 64,
                    dtype=np.float32) -> np.ndarray:
    """Run net_fn over image batches without recording gradients."""
    outs = []
    with no_grad():
        for sl in _batch_slices(len(samples), batch_size):
            x = np.stack([s.image for s in samples[sl]]).astype(dtype, copy=False)
            outs.append(net_fn(Tensor(x)).data)
    return np.concatenate(outs, axis=0)


def _val_classifier_metrics(net, val: Sequence[Sample], dtype) -> dict:
    labeled = [s for s in val if s.is_labeled()]
    if not labeled:
        return {}
    logits = predict_batched(net, labeled, dtype=dtype)
    probs = 1.0 / (1.0 + np.exp(-(logits[:, 1] - logits[:, 0])))
    labels = np.array([s.label for s in labeled])
    out = {"accuracy": float(((probs >= 0.5).astype(int) == labels).mean())}
    if 0 < labels.sum() < len(labels):
        out["auc"] = auc_score(probs, labels)
    return out


def _val_recon_metrics(net_fn, val: Sequence[Sample], dtype) -> dict:
    if not val:
        return {}
    recon = predict_batched(net_fn, val, dtype=dtype)
    x = np.stack([s.image for s in val]).astype(dtype, copy=False)
    per = ((recon - x) ** 2).mean(axis=(1, 2, 3))
    return {"mse": float(per.mean())}


def train_classifier(bundle: ModelBundle, samples: Sequence[Sample],
                     cfg: TrainConfig, val_samples: Sequence[Sample] = (),
                     checkpoint_path=None) -> TrainReport:
    """Supervised training on labeled samples only, cross-entropy objective."""
    t0 = time.perf_counter()
    labeled = [s for s in samples if s.is_labeled()]
    labels = np.array([s.label for s in labeled], dtype=np.int64)
    if len(labeled) == 0 or not (labels == ANOMALY).any():
        raise ValueError("train_classifier: need labeled anomaly samples")
    if not (labels == NORMAL).any():
        raise ValueError("train_classifier: need labeled normal samples")

    net = bundle.classifier
    dtype = cfg.dtype
    opt = Adam(net.named_parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    epoch_losses: List[float] = []
    val_metrics: List[dict] = []
    n = len(labeled)
    for epoch in range(cfg.epochs):
        order_rng, aug_rng = _epoch_rngs(cfg.seed, epoch)
        if cfg.sampler == "weighted":
            stream = weighted_sampler(labels, order_rng)
            order = np.fromiter(itertools.islice(stream, n), dtype=np.int64)
        else:
            order = order_rng.permutation(n)
        total, count = 0.0, 0
        for sl in _batch_slices(n, cfg.batch_size):
            idxs = order[sl]
            x = Tensor(_stack_batch(labeled, idxs, cfg.augment, aug_rng, dtype))
            y = labels[idxs].astype(dtype)
            loss = ce_loss(y, anomaly_probability(net(x)))
            backward(loss)
            opt.step()
            opt.zero_grad()
            total += loss.item() * len(idxs)
            count += len(idxs)
        epoch_losses.append(total / count)
        if val_samples:
            val_metrics.append(_val_classifier_metrics(net, val_samples, dtype))
    net.trained = True
    return _finish("classifier", net, cfg, epoch_losses, val_metrics, t0,
                   checkpoint_path)


def train_autoencoder(bundle: ModelBundle, samples: Sequence[Sample],
                      cfg: TrainConfig, val_samples: Sequence[Sample] = (),
                      checkpoint_path=None) -> TrainReport:
    """Reconstruction training; accepts only unlabeled or normal samples."""
    t0 = time.perf_counter()
    if any(s.label == ANOMALY for s in samples):
        raise ValueError(
            "train_autoencoder: anomaly-labeled samples must be filtered out")
    samples = list(samples)
    if not samples:
        raise ValueError("train_autoencoder: empty training set")

    net = bundle.autoencoder
    dtype = cfg.dtype
    opt = Adam(net.named_parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    epoch_losses: List[float] = []
    val_metrics: List[dict] = []
    n = len(samples)
    for epoch in range(cfg.epochs):
        order_rng, aug_rng = _epoch_rngs(cfg.seed, epoch)
        order = order_rng.permutation(n)
        total, count = 0.0, 0
        for sl in _batch_slices(n, cfg.batch_size):
            idxs = order[sl]
            x = Tensor(_stack_batch(samples, idxs, cfg.augment, aug_rng, dtype))
            loss = mse_loss(x, net(x))
            backward(loss)
            opt.step()
            opt.zero_grad()
            total += loss.item() * len(idxs)
            count += len(idxs)
        epoch_losses.append(total / count)
        if val_samples:
            val_metrics.append(_val_recon_metrics(net, val_samples, dtype))
    net.trained = True
    return _finish("autoencoder", net, cfg, epoch_losses, val_metrics, t0,
                   checkpoint_path)


def train_semi(bundle: ModelBundle, samples: Sequence[Sample], cfg: TrainConfig,
               val_samples: Sequence[Sample] = (),
               checkpoint_path=None) -> TrainReport:
    """Joint objective: reconstruction on every sample plus a weighted
    cross-entropy term on the labeled subset of each batch.

    Batches are ordered labeled-first so the supervised term can slice a
    contiguous block; unlabeled samples contribute reconstruction only.
    With semi_weight == 0 the procedure degenerates to autoencoder
    training of the encoder/decoder weights (the head is never updated).
    """
    t0 = time.perf_counter()
    samples = list(samples)
    if not samples:
        raise ValueError("train_semi: empty training set")
    if not any(s.is_labeled() for s in samples):
        raise ValueError("train_semi: no labeled samples; the head is untrainable")

    net = bundle.semi
    dtype = cfg.dtype
    lam = float(cfg.semi_weight)
    ae_params = (net.encoder.named_parameters("encoder.")
                 + net.decoder.named_parameters("decoder."))
    opt_ae = Adam(ae_params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    opt_head = Adam(net.head.named_parameters("head."), lr=cfg.lr,
                    betas=cfg.betas, eps=cfg.eps)
    epoch_losses: List[float] = []
    val_metrics: List[dict] = []
    n = len(samples)
    for epoch in range(cfg.epochs):
        order_rng, aug_rng = _epoch_rngs(cfg.seed, epoch)
        order = order_rng.permutation(n)
        total, count = 0.0, 0
        for sl in _batch_slices(n, cfg.batch_size):
            idxs = order[sl]
            # labeled-first, stable so the relative order is preserved
            idxs = np.array(sorted(idxs, key=lambda i: not samples[i].is_labeled()),
                            dtype=np.int64)
            n_lab = sum(1 for i in idxs if samples[i].is_labeled())
            x = Tensor(_stack_batch(samples, idxs, cfg.augment, aug_rng, dtype))
            recon, logits = net(x)
            loss = mse_loss(x, recon)
            supervised = lam > 0.0 and n_lab > 0
            if supervised:
                y = np.array([samples[i].label for i in idxs[:n_lab]], dtype=dtype)
                p = anomaly_probability(logits)
                loss = loss + lam * ce_loss(y, narrow(p, 0, 0, n_lab))
            backward(loss)
            opt_ae.step()
            if supervised:
                opt_head.step()
            net.zero_grad()
            total += loss.item() * len(idxs)
            count += len(idxs)
        epoch_losses.append(total / count)
        if val_samples:
            m = _val_recon_metrics(lambda t: net(t)[0], val_samples, dtype)
            m.update(_val_classifier_metrics(lambda t: net(t)[1],
                                             val_samples, dtype))
            val_metrics.append(m)
    net.trained = True
    return _finish("semi", net, cfg, epoch_losses, val_metrics, t0,
                   checkpoint_path)


def _finish(learner: str, net, cfg: TrainConfig, epoch_losses, val_metrics,
            t0: float, checkpoint_path) -> TrainReport:
    if checkpoint_path is not None:
        from .nets import save_checkpoint
        save_checkpoint(checkpoint_path, net)
    return TrainReport(
        learner=learner,
        epoch_losses=epoch_losses,
        val_metrics=val_metrics,
        wall_time_s=time.perf_counter() - t0,
        checkpoint_path=None if checkpoint_path is None else str(checkpoint_path),
        config=cfg.as_dict(),
    )
