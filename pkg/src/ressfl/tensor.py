"""Parameter container used by every layer.

Activations travel between layers as plain ``float64`` ndarrays; only
trainable state is wrapped in :class:`Tensor` so that optimizers can find the
value, its gradient and the freeze flag in one place.
"""
from __future__ import annotations

import numpy as np

from .errors import NonFiniteError, ShapeError

DTYPE = np.float64


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{what}: {bad} non-finite value(s) in array of shape {np.shape(arr)}")
    return arr


class Tensor:
    """A named parameter with a value buffer and an optional gradient buffer."""

    __slots__ = ("data", "grad", "trainable", "name")

    def __init__(self, data, name: str = "", trainable: bool = True):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"{name or 'tensor'}: all dims must be positive, got {arr.shape}")
        self.data = check_finite(arr, name or "tensor")
        self.grad: np.ndarray | None = None
        self.trainable = trainable
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def set_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"{self.name}: grad shape {g.shape} != data shape {self.data.shape}")
        self.grad = check_finite(np.asarray(g, dtype=DTYPE), f"grad of {self.name}")

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data.copy()
        t.grad = None if self.grad is None else self.grad.copy()
        t.trainable = self.trainable
        t.name = self.name
        return t

    def __repr__(self) -> str:
        return f"Tensor({self.name!r}, shape={self.shape}, trainable={self.trainable})"
