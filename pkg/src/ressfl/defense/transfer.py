"""Attacker-aware pretraining on an expert task and resistance transfer to a target task."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

from ..checkpoint import Checkpoint, load_into, network_tensors
from ..data import Dataset
from ..errors import ConfigError
from ..models import BottleneckConfig, SplitModel, build_split_classifier, insert_bottleneck
from ..sfl import NO_DEFENSE, RunHistory, SFLConfig, make_clients, run_sfl
from .aware import AttackerAwareHooks, AwareTrainConfig

log = logging.getLogger(__name__)

STRATEGIES = ("freeze", "simple_finetune", "aware_finetune")
TRANSFER_CLIENT_LR = 0.005
TRANSFER_OTHER_LR = 0.02


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    model: SplitModel
    history: RunHistory


def build_model(arch: str, cut_layer: int, input_shape, num_classes: int, seed: int,
                bottleneck: BottleneckConfig | None) -> SplitModel:
    model = build_split_classifier(arch, cut_layer, input_shape, num_classes, seed)
    if bottleneck is not None:
        model = insert_bottleneck(model, bottleneck, seed + 1)
    return model


def attacker_aware_pretrain(expert_train: Dataset, expert_val: Dataset | None, arch: str, cut_layer: int,
                            bottleneck: BottleneckConfig | None, cfg: AwareTrainConfig, epochs: int,
                            batch_size: int = 32, seed: int = 0, threads: int = 1,
                            progress=None) -> PretrainResult:
    """Single-client attacker-aware training; returns a checkpoint of the resistant model."""
    if bottleneck is None:
        warnings.warn("pretraining without a bottleneck layer; resistance will be weaker", stacklevel=2)
    model = build_model(arch, cut_layer, expert_train.image_shape, expert_train.num_classes, seed, bottleneck)
    sfl_cfg = SFLConfig(num_clients=1, epochs=epochs, batch_size=batch_size,
                        client_lr=cfg.client_lr, server_lr=cfg.other_lr)
    hooks = AttackerAwareHooks(cfg)
    history, clients, server = run_sfl(model, expert_train, expert_val, sfl_cfg, seed, hooks,
                                       threads=threads, progress=progress)
    model.client.load_state(clients[0].model.state())
    model.server.load_state(server.model.state())
    meta = {
        "arch": arch, "cut_layer": cut_layer, "bottleneck": str(bottleneck) if bottleneck else None,
        "lambda": cfg.lam, "sim_tier": cfg.sim_tier, "epochs": epochs, "seed": seed,
        "input_shape": list(expert_train.image_shape), "num_classes": expert_train.num_classes,
    }
    tensors = {**network_tensors(model.client, "client."), **network_tensors(model.server, "server.")}
    return PretrainResult(Checkpoint(tensors, meta), model, history)


def model_from_checkpoint(ckpt: Checkpoint, input_shape, num_classes: int, seed: int) -> SplitModel:
    """Target-task model: pretrained client part, freshly initialized server part."""
    meta = ckpt.metadata
    for key in ("arch", "cut_layer"):
        if key not in meta:
            raise ConfigError(f"checkpoint metadata lacks {key!r}")
    bn = BottleneckConfig.parse(meta["bottleneck"]) if meta.get("bottleneck") else None
    model = build_model(meta["arch"], int(meta["cut_layer"]), input_shape, num_classes, seed, bn)
    load_into(model.client, ckpt, "client.")
    return model


def resistance_transfer(ckpt: Checkpoint, target_train: Dataset, target_val: Dataset | None, strategy: str,
                        num_clients: int, epochs: int, batch_size: int = 32, seed: int = 0,
                        lam: float | None = None, record_epochs: Sequence[int] = (), threads: int = 1,
                        sampling_rate: float = 1.0, progress=None):
    """Continue SFL training of a pretrained client part on a new task.

    ``freeze`` keeps the client part fixed, ``simple_finetune`` trains it with a
    small learning rate, ``aware_finetune`` additionally keeps a cheap L0
    simulator in the loop (updated every 5 steps).
    Returns ``(history, clients, server, model)``.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown transfer strategy {strategy!r}; expected one of {STRATEGIES}")
    model = model_from_checkpoint(ckpt, target_train.image_shape, target_train.num_classes, seed)
    client_lr = 0.0 if strategy == "freeze" else TRANSFER_CLIENT_LR
    sfl_cfg = SFLConfig(num_clients=num_clients, epochs=epochs, batch_size=batch_size,
                        client_lr=client_lr, server_lr=TRANSFER_OTHER_LR, sampling_rate=sampling_rate)
    hooks = NO_DEFENSE
    if strategy == "aware_finetune":
        lam = float(ckpt.metadata.get("lambda", 0.3)) if lam is None else lam
        hooks = AttackerAwareHooks(AwareTrainConfig(lam=lam, sim_tier="L0", update_freq=5,
                                                    client_lr=TRANSFER_CLIENT_LR, other_lr=TRANSFER_OTHER_LR))
    clients = make_clients(model, target_train, sfl_cfg, seed, client_lr=client_lr, init_state=model.client.state())
    history, clients, server = run_sfl(model, target_train, target_val, sfl_cfg, seed, hooks, record_epochs,
                                       threads, clients=clients, progress=progress)
    return history, clients, server, model
