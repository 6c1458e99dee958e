"""Training-based model inversion by an honest-but-curious server.

The attacker holds a white-box copy of the synchronized client part, encodes
its auxiliary (validation) images with it, fits a decoder from activations back
to pixels by minimizing MSE with Adam, and then decodes the activations it
logged during training.  Reconstructions are scored against the private images
only for reporting.
"""
from __future__ import annotations

import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .errors import ConfigError, ShapeError, StaleAttackError
from .layers import Sequential
from .losses import mse_loss
from .models import TIERS, build_inversion_model
from .optim import Adam

log = logging.getLogger(__name__)

RESISTANCE_TARGET = 0.02
CSV_COLUMNS = ("epoch", "tier", "mse", "ssim", "psnr", "mse_best", "verdict")

# (activations, images, rng) -> activations
Perturbation = Callable[[np.ndarray, np.ndarray, np.random.Generator], np.ndarray]


@dataclass
class AttackConfig:
    tiers: tuple[str, ...] = TIERS
    attack_epochs: tuple[int, ...] = ()
    inversion_epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    base_width: int = 8
    patience: int = 5
    min_delta: float = 1e-5

    def __post_init__(self):
        self.tiers = tuple(self.tiers)
        self.attack_epochs = tuple(int(e) for e in self.attack_epochs)
        if not self.tiers:
            raise ConfigError("attack needs at least one inversion tier")
        bad = [t for t in self.tiers if t not in TIERS]
        if bad:
            raise ConfigError(f"unknown inversion tiers {bad}")


@dataclass
class InversionModel:
    net: Sequential
    tier: str
    epoch: int | None
    losses: list[float] = field(default_factory=list)


def encode(client: Sequential, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.concatenate([client.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


def _decode(net: Sequential, acts: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.concatenate([net.forward(acts[i:i + batch_size]) for i in range(0, len(acts), batch_size)])


def train_inversion_model(client: Sequential, tier: str, aux_images: np.ndarray, epochs: int = 50,
                          seed: int = 0, cfg: AttackConfig | None = None, epoch_tag: int | None = None,
                          perturb: Perturbation | None = None) -> InversionModel:
    """Fit a decoder ``G`` so that ``G(C(x_aux))`` matches ``x_aux``; ``client`` is only queried."""
    cfg = cfg or AttackConfig()
    if tier not in TIERS:
        raise ConfigError(f"unknown inversion tier {tier!r}; expected one of {TIERS}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3, TIERS.index(tier)]))
    acts = encode(client, aux_images)
    if perturb is not None:
        acts = perturb(acts, aux_images, rng)
    net = build_inversion_model(tier, acts.shape[1:], aux_images.shape[1:], cfg.base_width, rng)
    opt = Adam(net.parameters(), lr=cfg.lr)
    losses: list[float] = []
    n = len(aux_images)
    for _ in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            b = perm[i:i + cfg.batch_size]
            out = net.forward(acts[b])
            loss, g = mse_loss(out, aux_images[b])
            net.backward(g)
            opt.step()
            total += loss * len(b)
        losses.append(total / n)
        if len(losses) > cfg.patience and min(losses[:-cfg.patience]) - min(losses[-cfg.patience:]) < cfg.min_delta:
            break
    return InversionModel(net, tier, epoch_tag, losses)


def reconstruct(g: InversionModel, activations: np.ndarray, epoch_tag: int | None = None) -> np.ndarray:
    """Decode logged activations; refuses activations tagged with a different epoch than ``g``."""
    if epoch_tag is not None and g.epoch is not None and epoch_tag != g.epoch:
        raise StaleAttackError(f"inversion model trained for epoch {g.epoch}, activations are from epoch {epoch_tag}")
    first = g.net.layers[0]
    if activations.ndim != 4 or activations.shape[1] != first.in_ch:
        raise ShapeError(f"{g.tier} decoder expects [N,{first.in_ch},H,W] activations, got {activations.shape}")
    return _decode(g.net, activations)


@dataclass
class TierResult:
    tier: str
    mse: float
    ssim: float
    psnr: float
    recon: np.ndarray = field(repr=False)


@dataclass
class ResistanceRow:
    epoch: int
    tiers: list[TierResult]
    images: np.ndarray | None = field(default=None, repr=False)  # the private images that were attacked

    @property
    def mse_best(self) -> float:
        return min(t.mse for t in self.tiers)

    @property
    def mse_l0(self) -> float | None:
        return next((t.mse for t in self.tiers if t.tier == "L0"), None)

    @property
    def best(self) -> TierResult:
        return min(self.tiers, key=lambda t: t.mse)

    @property
    def verdict(self) -> bool:
        return self.mse_best >= RESISTANCE_TARGET


@dataclass
class AttackReport:
    rows: list[ResistanceRow] = field(default_factory=list)

    def mse_best(self, epoch: int) -> float:
        return next(r.mse_best for r in self.rows if r.epoch == epoch)

    def csv_rows(self) -> list[tuple]:
        out = []
        for r in self.rows:
            for t in r.tiers:
                out.append((r.epoch, t.tier, t.mse, t.ssim, t.psnr, r.mse_best, int(r.verdict)))
        return out


def evaluate_resistance(client: Sequential, private_images: np.ndarray, aux_images: np.ndarray,
                        cfg: AttackConfig, seed: int = 0, epoch: int = 0,
                        private_activations: np.ndarray | None = None,
                        perturb: Perturbation | None = None, threads: int = 1) -> ResistanceRow:
    """Train one decoder per tier against ``client`` and score its reconstructions.

    ``private_activations`` are what the server logged; when omitted they are
    recomputed from ``client`` (inference-time attack).  ``perturb`` is the
    deployed activation defense, which the white-box attacker also applies to
    its auxiliary activations.
    """
    if not cfg.tiers:
        raise ConfigError("attack needs at least one inversion tier")
    if private_activations is None:
        private_activations = encode(client, private_images)
        if perturb is not None:
            prng = np.random.default_rng(np.random.SeedSequence([seed, 4, epoch]))
            private_activations = perturb(private_activations, private_images, prng)
    if len(private_activations) != len(private_images):
        raise ShapeError(f"{len(private_activations)} activations for {len(private_images)} private images")

    def one(tier: str) -> TierResult:
        g = train_inversion_model(client, tier, aux_images, cfg.inversion_epochs,
                                  seed=int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0]),
                                  cfg=cfg, epoch_tag=epoch, perturb=perturb)
        rec = reconstruct(g, private_activations, epoch)
        m = metrics.mse(rec, private_images)
        log.info("epoch %d tier %s: mse %.5f after %d decoder epochs", epoch, tier, m, len(g.losses))
        return TierResult(tier, m, metrics.ssim(rec, private_images), metrics.psnr_from_mse(m), rec)

    if threads > 1 and len(cfg.tiers) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(one, cfg.tiers))
    else:
        results = [one(t) for t in cfg.tiers]
    return ResistanceRow(epoch, results, private_images)


def attack_schedule(history, client_template: Sequential, private_images: np.ndarray, aux_images: np.ndarray,
                    cfg: AttackConfig, seed: int = 0, epochs: Sequence[int] | None = None,
                    max_private: int | None = None, threads: int = 1) -> AttackReport:
    """Attack every scheduled epoch of a recorded run.

    ``private_images`` is indexed by the global sample indices stored next to
    the logged activations.
    """
    epochs = tuple(cfg.attack_epochs if epochs is None else epochs)
    if not epochs:
        raise ConfigError("attack schedule is empty")
    missing = [e for e in epochs if e not in history.snapshots]
    if missing:
        raise ConfigError(f"no snapshot for epochs {missing}; available: {history.epochs_available()}")
    report = AttackReport()
    for t in epochs:
        client = copy.deepcopy(client_template)
        client.load_state(history.snapshots[t])
        idx, acts = history.activations[t]
        if max_private is not None and len(idx) > max_private:
            keep = np.sort(np.argsort(idx, kind="stable")[:max_private])
            idx, acts = idx[keep], acts[keep]
        report.rows.append(evaluate_resistance(client, private_images[idx], aux_images, cfg, seed, t,
                                               private_activations=acts, threads=threads))
    return report
