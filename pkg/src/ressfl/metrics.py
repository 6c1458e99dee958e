"""Image-quality and task metrics: MSE, SSIM, PSNR and accuracy.

SSIM uses a uniform 7x7 window over "valid" positions with dynamic range 1,
computed per image and channel and then averaged.  Images smaller than the
window are scored with one global window.  :func:`ssim_and_grad` also returns
the gradient of the score with respect to its first argument, which the
attacker-aware training uses as a differentiable reconstruction score.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError

WINDOW = 7
C1 = (0.01 * 1.0) ** 2
C2 = (0.03 * 1.0) ** 2
PSNR_CAP = 100.0
PSNR_MSE_FLOOR = 1e-10


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"metric inputs differ in shape: {x.shape} vs {y.shape}")
    return x, y


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(x, y) -> float:
    return psnr_from_mse(mse(x, y))


def psnr_from_mse(m: float) -> float:
    if m < PSNR_MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / m))


def accuracy(outputs, labels) -> float:
    """Percentage of rows whose argmax equals the label (ties go to the lower index)."""
    outputs = np.asarray(outputs)
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return float(np.mean(outputs.argmax(axis=1) == labels) * 100.0)


# -- SSIM ------------------------------------------------------------------

def _as_images(x: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[None]
    if x.ndim == 4:
        return x
    raise ShapeError(f"SSIM expects [H,W], [C,H,W] or [N,C,H,W], got {x.shape}")


def _box_sum(a: np.ndarray, w: int) -> np.ndarray:
    """Sum over every w x w valid window of the last two axes."""
    c = np.cumsum(np.cumsum(a, axis=-2), axis=-1)
    c = np.pad(c, [(0, 0)] * (a.ndim - 2) + [(1, 0), (1, 0)])
    return c[..., w:, w:] - c[..., :-w, w:] - c[..., w:, :-w] + c[..., :-w, :-w]


class _Window:
    """Local mean operator and its adjoint for one image size."""

    def __init__(self, h: int, w: int, size: int = WINDOW):
        self.global_ = h < size or w < size
        self.size = size
        self.h, self.w = h, w

    def mean(self, a: np.ndarray) -> np.ndarray:
        if self.global_:
            return a.mean(axis=(-2, -1), keepdims=True)
        return _box_sum(a, self.size) / self.size ** 2

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        if self.global_:
            return np.broadcast_to(g, g.shape[:-2] + (self.h, self.w)) / (self.h * self.w)
        p = self.size - 1
        gp = np.pad(g, [(0, 0)] * (g.ndim - 2) + [(p, p), (p, p)])
        return _box_sum(gp, self.size) / self.size ** 2


def _ssim_terms(x: np.ndarray, y: np.ndarray):
    win = _Window(x.shape[-2], x.shape[-1])
    mx, my = win.mean(x), win.mean(y)
    exx, eyy, exy = win.mean(x * x), win.mean(y * y), win.mean(x * y)
    vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
    a1, a2 = 2 * mx * my + C1, 2 * cxy + C2
    b1, b2 = mx * mx + my * my + C1, vx + vy + C2
    smap = (a1 * a2) / (b1 * b2)
    return win, smap, (mx, my, a1, a2, b1, b2)


def ssim(x, y) -> float:
    x, y = _pair(x, y)
    x, y = _as_images(x), _as_images(y)
    _, smap, _ = _ssim_terms(x, y)
    return float(smap.mean())


def ssim_per_image(x, y) -> np.ndarray:
    x, y = _pair(x, y)
    x, y = _as_images(x), _as_images(y)
    _, smap, _ = _ssim_terms(x, y)
    return smap.mean(axis=(1, 2, 3))


def ssim_and_grad(x, y) -> tuple[float, np.ndarray]:
    """Mean SSIM of batch ``x`` against ``y`` and its gradient with respect to ``x``."""
    x, y = _pair(x, y)
    shape = x.shape
    x, y = _as_images(x), _as_images(y)
    win, smap, (mx, my, a1, a2, b1, b2) = _ssim_terms(x, y)
    scale = 1.0 / smap.size
    denom = b1 * b2
    d_mx = (2 * my * (a2 - a1) / denom - 2 * mx * smap / b1 + 2 * mx * smap / b2) * scale
    d_exx = -smap / b2 * scale
    d_exy = 2 * a1 / denom * scale
    grad = win.adjoint(d_mx) + 2 * x * win.adjoint(d_exx) + y * win.adjoint(d_exy)
    return float(smap.mean()), grad.reshape(shape)
