"""Finite-difference gradient checking harness shared by the unit and
acceptance suites.

Every registered op gets: f64 inputs drawn from a per-op sampler (samplers
keep values away from non-differentiable kinks, where central differences
cannot converge), a random-projection scalar loss, and an elementwise
central-difference comparison against the recorded backward pass.
"""

from __future__ import annotations

import zlib

import numpy as np

from vcead import ops
from vcead.tensor import (
    Tensor, backward, clamp, concat, hardswish, log, narrow, no_grad, power,
    relu, sigmoid,
)
from vcead.train import ce_loss, mse_loss

F64 = np.float64


def _away_from(values: np.ndarray, kinks, margin: float = 1e-2) -> np.ndarray:
    out = values.copy()
    for k in kinks:
        near = np.abs(out - k) < margin
        out[near] = k + np.where(out[near] >= k, margin, -margin) * 2
    return out


def _t(rng, shape, lo=-2.0, hi=2.0, kinks=()):
    vals = rng.uniform(lo, hi, size=shape)
    if kinks:
        vals = _away_from(vals, kinks)
    return Tensor(vals, requires_grad=True, dtype=F64)


def relative_gradient_error(fn, inputs, rng, h: float = 1e-4) -> float:
    """Worst rel. error of backward() vs central differences over all inputs.

    Relative error uses max(|analytic|, |numeric|, 1) as denominator so
    near-zero gradients are compared absolutely.
    """
    out = fn(*inputs)
    r = rng.normal(size=out.shape)
    loss = (out * Tensor(r, dtype=F64)).sum()
    backward(loss)
    worst = 0.0
    with no_grad():
        for t in inputs:
            if not isinstance(t, Tensor) or not t.requires_grad:
                continue
            analytic = t.grad
            assert analytic is not None, "leaf missing gradient after backward"
            flat = t.data.reshape(-1)
            fd = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = float((fn(*inputs).data * r).sum())
                flat[i] = orig - h
                down = float((fn(*inputs).data * r).sum())
                flat[i] = orig
                fd[i] = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1.0)
            worst = max(worst, float(np.max(np.abs(a - fd) / denom)))
    return worst


def _conv_case(rng):
    x = _t(rng, (2, 3, 5, 5))
    w = _t(rng, (4, 3, 3, 3), lo=-1.0, hi=1.0)
    b = _t(rng, (4,))
    stride = int(rng.integers(1, 3))
    return lambda x, w, b: ops.conv2d(x, w, b, stride=stride, padding=1), (x, w, b)


def _depthwise_case(rng):
    x = _t(rng, (2, 3, 5, 5))
    w = _t(rng, (3, 1, 3, 3), lo=-1.0, hi=1.0)
    b = _t(rng, (3,))
    stride = int(rng.integers(1, 3))
    return (lambda x, w, b: ops.depthwise_conv2d(x, w, b, stride=stride, padding=1),
            (x, w, b))


def _dense_case(rng):
    x = _t(rng, (4, 6))
    w = _t(rng, (6, 3), lo=-1.0, hi=1.0)
    b = _t(rng, (3,))
    return ops.dense, (x, w, b)


def _affine_case(rng):
    x = _t(rng, (2, 4, 3, 3))
    g = _t(rng, (4,), lo=0.2, hi=2.0)
    b = _t(rng, (4,))
    return ops.batchnorm_inference_affine, (x, g, b)


def _mse_case(rng):
    y = _t(rng, (3, 4))
    y_hat = _t(rng, (3, 4))
    return mse_loss, (y, y_hat)


def _ce_case(rng):
    y = Tensor(rng.integers(0, 2, size=8).astype(F64), dtype=F64)
    p = _t(rng, (8,), lo=0.05, hi=0.95)
    return lambda p: ce_loss(y, p), (p,)


OP_CASES = {
    "add": lambda rng: (lambda a, b: a + b, (_t(rng, (3, 4)), _t(rng, (1, 4)))),
    "sub": lambda rng: (lambda a, b: a - b, (_t(rng, (3, 4)), _t(rng, (3, 4)))),
    "mul": lambda rng: (lambda a, b: a * b, (_t(rng, (3, 4)), _t(rng, (3, 1)))),
    "power": lambda rng: (lambda a: power(a, 2.0), (_t(rng, (3, 4)),)),
    "log": lambda rng: (log, (_t(rng, (3, 4), lo=0.1, hi=3.0),)),
    "clamp": lambda rng: (lambda a: clamp(a, -0.5, 0.5),
                          (_t(rng, (4, 4), kinks=(-0.5, 0.5)),)),
    "relu": lambda rng: (relu, (_t(rng, (4, 5), kinks=(0.0,)),)),
    "sigmoid": lambda rng: (sigmoid, (_t(rng, (4, 5), lo=-4.0, hi=4.0),)),
    "hardswish": lambda rng: (hardswish,
                              (_t(rng, (4, 5), lo=-5.0, hi=5.0, kinks=(-3.0, 3.0)),)),
    "sum": lambda rng: (lambda a: a.sum(), (_t(rng, (3, 4)),)),
    "sum_axis": lambda rng: (lambda a: a.sum(axis=1).sum(), (_t(rng, (3, 4)),)),
    "mean": lambda rng: (lambda a: a.mean(), (_t(rng, (2, 3, 4)),)),
    "reshape": lambda rng: (lambda a: a.reshape(2, 6), (_t(rng, (3, 4)),)),
    "narrow": lambda rng: (lambda a: narrow(a, 1, 1, 2), (_t(rng, (3, 4)),)),
    "concat": lambda rng: (lambda a, b: concat((a, b), axis=1),
                           (_t(rng, (2, 3, 2, 2)), _t(rng, (2, 2, 2, 2)))),
    "conv2d": _conv_case,
    "depthwise_conv2d": _depthwise_case,
    "dense": _dense_case,
    "global_avg_pool": lambda rng: (ops.global_avg_pool, (_t(rng, (2, 3, 4, 4)),)),
    "upsample_nearest": lambda rng: (lambda a: ops.upsample_nearest(a, 2),
                                     (_t(rng, (2, 3, 3, 3)),)),
    "batchnorm_inference_affine": _affine_case,
    "mse_loss": _mse_case,
    "ce_loss": _ce_case,
}


def check_op_gradients(name: str, n_seeds: int = 20, tol: float = 1e-4) -> float:
    """Run n_seeds random gradient checks for one op; return the worst error."""
    worst = 0.0
    for seed in range(n_seeds):
        rng = np.random.default_rng([zlib.crc32(name.encode()), seed])
        fn, inputs = OP_CASES[name](rng)
        err = relative_gradient_error(fn, inputs, rng)
        worst = max(worst, err)
        assert err < tol, f"{name}: seed {seed} rel error {err:.3e} >= {tol}"
    return worst
