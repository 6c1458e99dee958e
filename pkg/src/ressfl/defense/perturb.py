"""Activation perturbation baselines: Laplacian noise, dropout mask, top-k pruning, FGSM noise."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..layers import Sequential
from ..losses import mse_loss

METHODS = ("none", "laplacian", "dropout", "topk", "advnoise")


@dataclass(frozen=True)
class PerturbConfig:
    method: str = "none"
    value: float = 0.0

    def __post_init__(self):
        m, v = self.method, self.value
        if m not in METHODS:
            raise ConfigError(f"unknown perturbation {m!r}; expected one of {METHODS}")
        if m == "laplacian" and v < 0:
            raise ConfigError(f"Laplacian scale b must be >= 0, got {v}")
        if m == "dropout" and not 0 <= v < 1:
            raise ConfigError(f"dropout p must lie in [0, 1), got {v}")
        if m == "topk" and not 0 < v <= 100:
            raise ConfigError(f"top-k percentage must lie in (0, 100], got {v}")
        if m == "advnoise" and v < 0:
            raise ConfigError(f"adversarial epsilon must be >= 0, got {v}")

    @property
    def label(self) -> str:
        sym = {"laplacian": "b", "dropout": "p", "topk": "k", "advnoise": "eps"}.get(self.method)
        return "none" if sym is None else f"{self.method}:{sym}={self.value:g}"


def top_k_prune(act: np.ndarray, k: float) -> np.ndarray:
    """Keep the ``k`` percent largest-magnitude elements of each sample, zero the rest."""
    n = act.shape[0]
    flat = act.reshape(n, -1)
    keep = min(flat.shape[1], max(1, math.ceil(k / 100.0 * flat.shape[1] - 1e-9)))
    order = np.argsort(-np.abs(flat), axis=1, kind="stable")[:, :keep]
    out = np.zeros_like(flat)
    np.put_along_axis(out, order, np.take_along_axis(flat, order, axis=1), axis=1)
    return out.reshape(act.shape)


def adversarial_noise(act: np.ndarray, images: np.ndarray, surrogate: Sequential, eps: float) -> np.ndarray:
    """``eps * sign(grad_A MSE(surrogate(A), x))``: one FGSM step that hurts the surrogate's reconstruction."""
    rec = surrogate.forward(act)
    _, g = mse_loss(rec, images)
    return eps * np.sign(surrogate.backward(g))


def perturb_activation(act: np.ndarray, cfg: PerturbConfig, rng: np.random.Generator,
                       surrogate: Sequential | None = None, images: np.ndarray | None = None) -> np.ndarray:
    m, v = cfg.method, cfg.value
    if m == "none":
        return act
    if m == "laplacian":
        return act if v == 0 else act + rng.laplace(0.0, v, size=act.shape)
    if m == "dropout":
        return act if v == 0 else act * (rng.random(act.shape) >= v)
    if m == "topk":
        return act if v == 100 else top_k_prune(act, v)
    if surrogate is None or images is None:
        raise ConfigError("adversarial noise needs a surrogate inversion model and the input images")
    return act if v == 0 else act + adversarial_noise(act, images, surrogate, v)


def make_perturbation(cfg: PerturbConfig, surrogate: Sequential | None = None):
    """Adapter to the attack module's ``(activations, images, rng) -> activations`` signature."""
    if cfg.method == "none":
        return None
    if cfg.method == "advnoise" and surrogate is None:
        raise ConfigError("adversarial noise needs a surrogate inversion model")

    def apply(act, images, rng, batch_size: int = 256):
        parts = [perturb_activation(act[i:i + batch_size], cfg, rng, surrogate, images[i:i + batch_size])
                 for i in range(0, len(act), batch_size)]
        return np.concatenate(parts)

    return apply
