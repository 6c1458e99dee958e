"""Scalar losses returning ``(value, gradient w.r.t. the prediction)``."""
from __future__ import annotations

import numpy as np

from .errors import NonFiniteError, ShapeError


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy averaged over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    loss = float(-logp[np.arange(n), labels].mean())
    if not np.isfinite(loss):
        raise NonFiniteError(f"cross-entropy loss is {loss}")
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    if not np.isfinite(loss):
        raise NonFiniteError(f"MSE loss is {loss}")
    return loss, 2.0 * diff / diff.size
