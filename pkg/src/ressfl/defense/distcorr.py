"""Distance-correlation regularizer (biased V-statistic) with its gradient."""
from __future__ import annotations

import numpy as np

from ..errors import ConfigError, ShapeError
from ..sfl import DefenseHooks


def _pairwise(z: np.ndarray) -> np.ndarray:
    sq = np.sum(z * z, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (z @ z.T)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(np.maximum(d2, 0.0))


def _double_center(d: np.ndarray) -> np.ndarray:
    return d - d.mean(axis=0, keepdims=True) - d.mean(axis=1, keepdims=True) + d.mean()


def _flat(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[0], -1)


def distance_correlation(x, a) -> float:
    return dcor_and_grad(x, a, need_grad=False)[0]


def dcor_and_grad(x, a, need_grad: bool = True) -> tuple[float, np.ndarray | None]:
    """dCor between sample rows of ``x`` and ``a`` and its gradient with respect to ``a``."""
    xf, af = _flat(x), _flat(a)
    if xf.shape[0] != af.shape[0]:
        raise ShapeError(f"dCor needs paired samples, got {xf.shape[0]} and {af.shape[0]}")
    n = xf.shape[0]
    if n < 2:
        raise ConfigError("dCor needs a batch of at least 2 samples")
    ca, b = _double_center(_pairwise(xf)), _pairwise(af)
    cb = _double_center(b)
    dcov2 = np.mean(ca * cb)
    var_x, var_a = np.mean(ca * ca), np.mean(cb * cb)
    if var_x <= 0 or var_a <= 0 or dcov2 <= 0:
        return 0.0, (np.zeros_like(np.asarray(a, dtype=np.float64)) if need_grad else None)
    r2 = dcov2 / np.sqrt(var_x * var_a)
    dcor = float(np.sqrt(r2))
    if not need_grad:
        return dcor, None
    d_r2_db = (ca / np.sqrt(var_x * var_a) - r2 * cb / var_a) / n ** 2
    gb = d_r2_db / (2.0 * dcor)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(b > 0, gb / b, 0.0)
    grad = 2.0 * (w.sum(axis=1)[:, None] * af - w @ af)
    return dcor, grad.reshape(np.shape(a))


class DistCorrHooks(DefenseHooks):
    """Adds ``alpha * d dCor(x, A) / dA`` to the client's activation gradient."""

    def __init__(self, alpha: float):
        if alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {alpha}")
        self.alpha = alpha

    def extra_grad(self, client, activation, images):
        if self.alpha == 0 or len(activation) < 2:
            return None
        _, g = dcor_and_grad(images, activation)
        return self.alpha * g
