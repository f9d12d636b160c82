"""Adam optimizer over named parameter lists."""

from __future__ import annotations

from typing import Iterable, Sequence, Tuple, Union

import numpy as np

from .tensor import Tensor

NamedParam = Tuple[str, Tensor]


class MissingGradientError(RuntimeError):
    """A parameter reached the optimizer step without a populated gradient."""


class Adam:
    """Standard Adam with bias correction.

    Accepts either bare tensors or (name, tensor) pairs; names make the
    missing-gradient diagnostic readable.
    """

    def __init__(self, params: Iterable[Union[Tensor, NamedParam]],
                 lr: float = 1e-3, betas: Sequence[float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params: list[NamedParam] = []
        for i, p in enumerate(params):
            if isinstance(p, Tensor):
                self.params.append((f"param{i}", p))
            else:
                name, t = p
                self.params.append((str(name), t))
        if not self.params:
            raise ValueError("Adam: empty parameter list")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.step_count = 0
        self._m = [np.zeros_like(t.data) for _, t in self.params]
        self._v = [np.zeros_like(t.data) for _, t in self.params]

    def step(self) -> None:
        for name, t in self.params:
            if t.grad is None:
                raise MissingGradientError(
                    f"Adam.step: parameter {name!r} has no gradient")
        self.step_count += 1
        t_ = self.step_count
        b1, b2 = self.beta1, self.beta2
        for i, (_, p) in enumerate(self.params):
            g = p.grad
            self._m[i] = b1 * self._m[i] + (1.0 - b1) * g
            self._v[i] = b2 * self._v[i] + (1.0 - b2) * g * g
            m_hat = self._m[i] / (1.0 - b1 ** t_)
            v_hat = self._v[i] / (1.0 - b2 ** t_)
            p.data = p.data - (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None
