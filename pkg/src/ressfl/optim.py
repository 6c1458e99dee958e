"""SGD with momentum, Adam, and the step learning-rate schedule."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, check_finite


class Optimizer:
    kind = "Optimizer"

    def __init__(self, params: Iterable[Tensor], lr: float, clip_norm: float | None = None):
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if clip_norm is not None and not clip_norm > 0:
            raise ValueError(f"clip_norm must be positive, got {clip_norm}")
        self.params: list[Tensor] = list(params)
        self.lr = float(lr)
        self.base_lr = self.lr
        self.clip_norm = clip_norm
        self.step_count = 0

    def _grads(self, grads: Sequence[np.ndarray] | None) -> list[np.ndarray | None]:
        if grads is None:
            return [p.grad for p in self.params]
        grads = list(grads)
        if len(grads) != len(self.params):
            raise ShapeError(f"{self.kind}: got {len(grads)} gradients for {len(self.params)} parameters")
        for p, g in zip(self.params, grads):
            if g is not None and np.shape(g) != p.shape:
                raise ShapeError(f"{self.kind}: gradient shape {np.shape(g)} != parameter {p.name!r} shape {p.shape}")
        return grads

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        """Apply one update to every trainable parameter that has a gradient."""
        grads = self._grads(grads)
        self.step_count += 1
        if self.clip_norm is not None:
            live = [np.asarray(g) for p, g in zip(self.params, grads) if p.trainable and g is not None]
            norm = float(np.sqrt(sum(np.sum(g * g) for g in live)))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
                grads = [None if g is None else np.asarray(g) * scale for g in grads]
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if not p.trainable or g is None:
                continue
            self._update(i, p, np.asarray(g, dtype=np.float64))
            check_finite(p.data, f"parameter {p.name!r} after {self.kind} step")

    def _update(self, i: int, p: Tensor, g: np.ndarray) -> None:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class SGD(Optimizer):
    """``buf = momentum * buf + g``; ``w -= lr * buf``.

    With ``clip_norm`` set, the gradients of one step are rescaled so their
    joint L2 norm does not exceed it.
    """

    kind = "SGD"

    def __init__(self, params: Iterable[Tensor], lr: float = 0.05, momentum: float = 0.9,
                 clip_norm: float | None = None):
        super().__init__(params, lr, clip_norm)
        if not 0 <= momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.momentum = momentum
        self.buffers: list[np.ndarray | None] = [None] * len(self.params)

    def _update(self, i, p, g):
        if self.momentum:
            buf = self.buffers[i]
            buf = g.copy() if buf is None else self.momentum * buf + g
            self.buffers[i] = buf
            g = buf
        p.data = p.data - self.lr * g


class Adam(Optimizer):
    kind = "Adam"

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def _update(self, i, p, g):
        t = self.step_count
        self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
        self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
        m_hat = self.m[i] / (1 - self.beta1 ** t)
        v_hat = self.v[i] / (1 - self.beta2 ** t)
        p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def sgd_step(opt: SGD, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> Sequence[Tensor]:
    if opt.kind != "SGD":
        raise TypeError(f"sgd_step needs an SGD optimizer, got {opt.kind}")
    _check_same_params(opt, params)
    opt.step(grads)
    return params


def adam_step(opt: Adam, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> Sequence[Tensor]:
    if opt.kind != "Adam":
        raise TypeError(f"adam_step needs an Adam optimizer, got {opt.kind}")
    _check_same_params(opt, params)
    opt.step(grads)
    return params


def _check_same_params(opt: Optimizer, params: Sequence[Tensor]) -> None:
    if len(params) != len(opt.params) or any(a is not b for a, b in zip(params, opt.params)):
        raise ValueError("parameters do not match the ones this optimizer was built for")


def step_decay_lr(base_lr: float, epoch: int, total_epochs: int, factor: float = 0.2,
                  milestones: tuple[float, float] = (0.5, 0.8)) -> float:
    """Learning rate for a 0-based ``epoch``: multiplied by ``factor`` at each milestone fraction."""
    lr = base_lr
    for m in milestones:
        if epoch >= int(round(m * total_epochs)):
            lr *= factor
    return lr
