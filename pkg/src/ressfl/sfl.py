"""SFL-V2 training loop: parallel clients, one shared server model, per-epoch averaging.

Each epoch:

1. the server averages the client-part replicas that trained in the previous
   epoch and broadcasts the result (``C*``) to this epoch's participants;
2. participants walk their own shard in a seeded order.  Per round every
   participant runs its client part (optionally on a thread), the server then
   serves the participants strictly in client-id order (forward, loss,
   backward, step) and returns activation gradients, and finally each client
   finishes its backward pass and steps its own optimizer.

The server only ever sees activations, labels and (at averaging time) replica
parameters; every hand-off is recorded in ``ServerState.audit``.
"""
from __future__ import annotations

import copy
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import metrics
from .data import Dataset, partition_clients
from .errors import ConfigError, NonFiniteError, PrivacyViolation, ShapeError
from .layers import Sequential
from .losses import cross_entropy
from .models import SplitModel
from .optim import SGD, step_decay_lr

log = logging.getLogger(__name__)

SERVER_VISIBLE = frozenset({"activation", "labels", "replica"})


class TrainingDiverged(NonFiniteError):
    pass


def client_rng(seed: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 1, client_id]))


def server_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 2]))


def batch_order(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class SFLConfig:
    num_clients: int = 2
    epochs: int = 20
    batch_size: int = 32
    client_lr: float = 0.05
    server_lr: float = 0.05
    momentum: float = 0.9
    sampling_rate: float = 1.0
    lr_decay: bool = True
    clip_norm: float | None = 2.0


@dataclass
class ClientState:
    id: int
    model: Sequential
    shard: np.ndarray
    private: Dataset = field(repr=False)
    rng: np.random.Generator = field(repr=False)
    lr: float
    optimizer: SGD | None = field(default=None, repr=False)
    inversion: Sequential | None = field(default=None, repr=False)
    inversion_optimizer: object = field(default=None, repr=False)
    steps: int = 0

    def __post_init__(self):
        self.shard = np.asarray(self.shard, dtype=np.int64)
        self._pos = {int(g): i for i, g in enumerate(self.shard)}
        if self.optimizer is None and self.lr > 0:
            self.optimizer = SGD(self.model.parameters(), lr=self.lr)

    def local_batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        """Images/labels for global dataset ``indices``; they must all belong to this client's shard."""
        idx = np.asarray(indices, dtype=np.int64)
        try:
            local = [self._pos[int(i)] for i in idx]
        except KeyError as e:
            raise PrivacyViolation(f"client {self.id} asked for sample {e.args[0]} outside its shard") from None
        return self.private.images[local], self.private.labels[local]


@dataclass
class LogEntry:
    client: int
    epoch: int
    indices: np.ndarray
    activation: np.ndarray


class ServerState:
    def __init__(self, model: Sequential, lr: float, total_epochs: int, momentum: float = 0.9,
                 log_epochs: set[int] | None = None, clip_norm: float | None = None):
        self.model = model
        self.optimizer = SGD(model.parameters(), lr=lr, momentum=momentum, clip_norm=clip_norm)
        self.base_lr = lr
        self.central: dict[str, np.ndarray] | None = None
        self.activation_log: list[LogEntry] = []
        self.audit: list[tuple[str, int, int]] = []
        self.epoch = 0
        self.total_epochs = total_epochs
        self.log_epochs = log_epochs
        self.fresh: list[int] | None = None

    def _record(self, kind: str, client: int) -> None:
        if kind not in SERVER_VISIBLE:
            raise PrivacyViolation(f"server may not receive {kind!r}")
        self.audit.append((kind, client, self.epoch))

    def receive_activation(self, client: int, indices, activation: np.ndarray) -> None:
        self._record("activation", client)
        if self.log_epochs is None or self.epoch in self.log_epochs:
            self.activation_log.append(LogEntry(client, self.epoch, np.array(indices), activation.copy()))

    def train_step(self, client: int, activation: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
        """Finish the forward pass, step the server model and return d(loss)/d(activation)."""
        self._record("labels", client)
        logits = self.model.forward(activation)
        try:
            loss, g = cross_entropy(logits, labels)
        except NonFiniteError as e:
            raise TrainingDiverged(f"epoch {self.epoch}, client {client}: {e}") from None
        g_act = self.model.backward(g)
        self.optimizer.step()
        return loss, g_act

    def logged(self, epoch: int) -> list[LogEntry]:
        return [e for e in self.activation_log if e.epoch == epoch]


def federated_average(replicas: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Element-wise mean of client-part parameter dicts.

    Computed as ``r0 + mean(r_i - r0)`` so that identical replicas average to
    themselves bit-for-bit.
    """
    if not replicas:
        raise ConfigError("federated_average needs at least one replica")
    first = replicas[0]
    for r in replicas[1:]:
        if r.keys() != first.keys():
            raise ShapeError(f"replica parameter names differ: {sorted(set(r) ^ set(first))}")
        for k in first:
            if r[k].shape != first[k].shape:
                raise ShapeError(f"replica tensor {k!r}: shape {r[k].shape} vs {first[k].shape}")
    n = len(replicas)
    out = {}
    for k, base in first.items():
        delta = np.zeros_like(base)
        for r in replicas[1:]:
            delta += r[k] - base
        out[k] = base + delta / n
    return out


def sample_clients(clients: Sequence, rate: float, rng: np.random.Generator) -> list:
    """``ceil(rate * N)`` clients without replacement, returned in id order."""
    if not 0 < rate <= 1:
        raise ConfigError(f"sampling rate must lie in (0, 1], got {rate}")
    n = len(clients)
    k = min(n, max(1, math.ceil(rate * n - 1e-9)))
    if k == n:
        return list(clients)
    chosen = sorted(rng.choice(n, size=k, replace=False).tolist())
    return [clients[i] for i in chosen]


def client_forward(client: ClientState, indices, server: ServerState | None = None):
    """Run ``C^i`` on a batch of the client's own samples; logs the activation at the server if given."""
    x, y = client.local_batch(indices)
    act = client.model.forward(x)
    if server is not None:
        server.receive_activation(client.id, indices, act)
    return act, x, y


class DefenseHooks:
    """Client-side interposition points used by the defenses.  The base class is a no-op."""

    def setup_client(self, client: ClientState, model: SplitModel, seed: int) -> None:
        pass

    def after_forward(self, client: ClientState, activation: np.ndarray, images: np.ndarray) -> None:
        pass

    def extra_grad(self, client: ClientState, activation: np.ndarray, images: np.ndarray) -> np.ndarray | None:
        return None


NO_DEFENSE = DefenseHooks()


@dataclass
class EpochResult:
    epoch: int
    train_loss: float
    val_accuracy: float
    wall_steps: int


def _client_backward(client: ClientState, grad: np.ndarray) -> None:
    client.model.backward(grad)
    if client.optimizer is not None:
        client.optimizer.step()
    client.steps += 1


def evaluate_accuracy(client_model: Sequential, server_model: Sequential, data: Dataset,
                      batch_size: int = 256, transform=None) -> float:
    correct_logits = []
    for i in range(0, len(data), batch_size):
        act = client_model.forward(data.images[i:i + batch_size])
        if transform is not None:
            act = transform(act, data.images[i:i + batch_size])
        correct_logits.append(server_model.forward(act))
    if not correct_logits:
        return 0.0
    return metrics.accuracy(np.concatenate(correct_logits), data.labels)


def _map(executor, fn, items):
    if executor is None:
        return [fn(it) for it in items]
    return list(executor.map(fn, items))


def sfl_train_epoch(clients: Sequence[ClientState], server: ServerState, hooks: DefenseHooks = NO_DEFENSE,
                    cfg: SFLConfig | None = None, val: Dataset | None = None, sampler_rng=None,
                    executor: ThreadPoolExecutor | None = None) -> EpochResult:
    cfg = cfg or SFLConfig()
    t = server.epoch + 1
    if t > server.total_epochs:
        raise ConfigError(f"epoch {t} exceeds the configured total of {server.total_epochs}")
    server.epoch = t
    by_id = {c.id: c for c in clients}

    # (1) average the replicas that trained last epoch, broadcast to this epoch's participants
    participants = (sample_clients(clients, cfg.sampling_rate, sampler_rng) if cfg.sampling_rate < 1
                    else list(clients))
    fresh = server.fresh if server.fresh is not None else [c.id for c in clients]
    for cid in fresh:
        server._record("replica", cid)
    central = federated_average([by_id[cid].model.state() for cid in fresh])
    server.central = central
    for c in participants:
        c.model.load_state(central)

    frac_epoch = t - 1
    server.optimizer.lr = step_decay_lr(server.base_lr, frac_epoch, server.total_epochs) if cfg.lr_decay else server.base_lr
    for c in participants:
        if c.optimizer is not None:
            c.optimizer.lr = step_decay_lr(c.lr, frac_epoch, server.total_epochs) if cfg.lr_decay else c.lr
        # a local simulator follows the same schedule so the min-max game keeps its balance
        if c.inversion_optimizer is not None:
            opt = c.inversion_optimizer
            opt.lr = step_decay_lr(opt.base_lr, frac_epoch, server.total_epochs) if cfg.lr_decay else opt.base_lr

    # (2) round-robin over batches
    orders = {c.id: [c.shard[b] for b in batch_order(c.rng, len(c.shard), cfg.batch_size)] for c in participants}
    rounds = max(len(o) for o in orders.values())
    losses, steps = [], 0
    for r in range(rounds):
        active = [c for c in participants if r < len(orders[c.id])]

        def forward_stage(c):
            act, x, y = client_forward(c, orders[c.id][r])
            hooks.after_forward(c, act, x)
            return act, x, y

        fwd = _map(executor, forward_stage, active)
        grads = []
        for c, (act, x, y) in zip(active, fwd):
            server.receive_activation(c.id, orders[c.id][r], act)
            loss, g = server.train_step(c.id, act, y)
            losses.append(loss)
            grads.append(g)

        def backward_stage(item):
            c, (act, x, _), g = item
            extra = hooks.extra_grad(c, act, x)
            _client_backward(c, g if extra is None else g + extra)

        _map(executor, backward_stage, list(zip(active, fwd, grads)))
        steps += len(active)

    server.fresh = [c.id for c in participants]
    acc = float("nan")
    if val is not None:
        snap = end_of_epoch_client(clients, server)
        acc = evaluate_accuracy(snap, server.model, val)
    return EpochResult(t, float(np.mean(losses)) if losses else float("nan"), acc, steps)


def end_of_epoch_client(clients: Sequence[ClientState], server: ServerState) -> Sequential:
    """A client-part network holding the average of the replicas that just trained."""
    by_id = {c.id: c for c in clients}
    ids = server.fresh if server.fresh is not None else list(by_id)
    avg = federated_average([by_id[i].model.state() for i in ids])
    net = copy.deepcopy(by_id[ids[0]].model)
    net.load_state(avg)
    return net


@dataclass
class RunHistory:
    epochs: list[EpochResult] = field(default_factory=list)
    snapshots: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)
    server_snapshots: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)
    activations: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def epochs_available(self) -> list[int]:
        return sorted(self.snapshots)


def make_clients(model: SplitModel, train: Dataset, cfg: SFLConfig, seed: int,
                 client_lr: float | None = None, init_state: dict[str, np.ndarray] | None = None,
                 momentum: float | None = None) -> list[ClientState]:
    """One client per shard, each with its own replica of the client part and RNG stream."""
    shards = partition_clients(len(train), cfg.num_clients, seed)
    lr = cfg.client_lr if client_lr is None else client_lr
    clients = []
    for i, shard in enumerate(shards):
        replica = copy.deepcopy(model.client)
        if init_state is not None:
            replica.load_state(init_state)
        opt = (SGD(replica.parameters(), lr=lr, momentum=cfg.momentum if momentum is None else momentum,
                   clip_norm=cfg.clip_norm) if lr > 0 else None)
        clients.append(ClientState(i, replica, shard, train.subset(shard), client_rng(seed, i), lr, opt))
    return clients


def run_sfl(model: SplitModel, train: Dataset, val: Dataset, cfg: SFLConfig, seed: int,
            hooks: DefenseHooks = NO_DEFENSE, record_epochs: Sequence[int] = (), threads: int = 1,
            clients: list[ClientState] | None = None, server_lr: float | None = None,
            progress=None) -> tuple[RunHistory, list[ClientState], ServerState]:
    """Train ``model`` with SFL-V2 for ``cfg.epochs`` epochs.

    Snapshots of the synchronized client part (taken after each epoch in
    ``record_epochs``) and the activations the server logged in those epochs are
    kept in the returned history for the attacker.
    """
    record = set(int(e) for e in record_epochs)
    if clients is None:
        clients = make_clients(model, train, cfg, seed)
    for c in clients:
        hooks.setup_client(c, model, seed)
    server = ServerState(copy.deepcopy(model.server), cfg.server_lr if server_lr is None else server_lr,
                         cfg.epochs, cfg.momentum, log_epochs=record, clip_norm=cfg.clip_norm)
    sampler = server_rng(seed)
    history = RunHistory()
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for _ in range(cfg.epochs):
            res = sfl_train_epoch(clients, server, hooks, cfg, val, sampler, executor)
            history.epochs.append(res)
            if progress is not None:
                progress(res)
            log.info("epoch %d loss %.4f val acc %.2f", res.epoch, res.train_loss, res.val_accuracy)
            if res.epoch in record:
                history.snapshots[res.epoch] = end_of_epoch_client(clients, server).state()
                history.server_snapshots[res.epoch] = server.model.state()
                entries = server.logged(res.epoch)
                idx = np.concatenate([e.indices for e in entries])
                acts = np.concatenate([e.activation for e in entries])
                history.activations[res.epoch] = (idx, acts)
    finally:
        if executor is not None:
            executor.shutdown()
    return history, clients, server
