"""Attacker-aware min-max training.

Each client keeps a local simulated inversion model ``D``.  Per step:

* Phase A (every ``update_freq`` steps): with the client part fixed, update
  ``D`` by gradient ascent on SSIM(D(A), x).
* Phase B (every step): with ``D`` fixed, client and server descend
  CE + lambda * SSIM(D(A), x).  The SSIM term only reaches the client part.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, NonFiniteError
from ..metrics import ssim_and_grad
from ..models import TIERS, build_inversion_model
from ..optim import Adam
from ..sfl import ClientState, DefenseHooks, ServerState, _client_backward, client_forward


@dataclass
class AwareTrainConfig:
    lam: float = 0.3
    sim_tier: str = "L3"
    update_freq: int = 1
    client_lr: float = 0.05
    other_lr: float = 0.05
    inversion_lr: float = 1e-3
    base_width: int = 8
    # Adam steps per Phase A; the maximization over the simulator's weights is approximated by this many steps
    inner_steps: int = 1

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.update_freq < 1:
            raise ConfigError(f"inversion update frequency must be >= 1, got {self.update_freq}")
        if self.inner_steps < 1:
            raise ConfigError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.sim_tier not in TIERS:
            raise ConfigError(f"unknown simulator tier {self.sim_tier!r}")


class AttackerAwareHooks(DefenseHooks):
    def __init__(self, cfg: AwareTrainConfig):
        self.cfg = cfg
        self.phase_a_runs: dict[int, int] = {}
        self.last_score: dict[int, float] = {}

    def setup_client(self, client: ClientState, model, seed: int) -> None:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 5, client.id]))
        client.inversion = build_inversion_model(self.cfg.sim_tier, model.activation_shape, model.input_shape,
                                                 self.cfg.base_width, rng)
        client.inversion_optimizer = Adam(client.inversion.parameters(), lr=self.cfg.inversion_lr)
        self.phase_a_runs[client.id] = 0

    def phase_a(self, client: ClientState, activation: np.ndarray, images: np.ndarray) -> float:
        """Ascend SSIM with respect to the simulator's weights only."""
        for _ in range(self.cfg.inner_steps):
            rec = client.inversion.forward(activation)
            score, g = ssim_and_grad(rec, images)
            if not np.isfinite(score):
                raise NonFiniteError(f"phase A (client {client.id}): SSIM score is {score}")
            client.inversion.backward(-g)
            client.inversion_optimizer.step()
        self.phase_a_runs[client.id] = self.phase_a_runs.get(client.id, 0) + 1
        return score

    def phase_b_grad(self, client: ClientState, activation: np.ndarray, images: np.ndarray) -> np.ndarray:
        """lambda * d SSIM / d activation through the frozen simulator."""
        rec = client.inversion.forward(activation)
        score, g = ssim_and_grad(rec, images)
        if not np.isfinite(score):
            raise NonFiniteError(f"phase B (client {client.id}): SSIM score is {score}")
        self.last_score[client.id] = score
        return client.inversion.backward(self.cfg.lam * g)

    def after_forward(self, client, activation, images):
        if client.steps % self.cfg.update_freq == 0:
            self.phase_a(client, activation, images)

    def extra_grad(self, client, activation, images):
        if self.cfg.lam == 0:
            return None
        return self.phase_b_grad(client, activation, images)


def attacker_aware_step(client: ClientState, server: ServerState, indices, hooks: AttackerAwareHooks) -> float:
    """One attacker-aware SFL step for a single client; returns the cross-entropy loss."""
    act, x, y = client_forward(client, indices)
    hooks.after_forward(client, act, x)
    server.receive_activation(client.id, indices, act)
    loss, g = server.train_step(client.id, act, y)
    extra = hooks.extra_grad(client, act, x)
    _client_backward(client, g if extra is None else g + extra)
    return loss
