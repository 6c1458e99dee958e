import copy

import numpy as np

from ressfl.defense import AttackerAwareHooks
from ressfl.layers import Layer
from ressfl.sfl import SFLConfig, ServerState, make_clients, sfl_train_epoch


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to ``arr`` (mutated in place, then restored)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))


def check_layer_grads(layer: Layer, x: np.ndarray, rng: np.random.Generator) -> float:
    """Worst relative error over input and parameter gradients for loss = sum(w * layer(x))."""
    out = layer.forward(x)
    w = rng.normal(size=out.shape)
    dx = layer.backward(w)
    param_grads = {name: p.grad.copy() for name, p in layer.named_params()}

    def loss():
        return float(np.sum(w * layer.forward(x)))

    errs = [rel_err(dx, numeric_grad(loss, x))]
    for name, p in layer.named_params():
        errs.append(rel_err(param_grads[name], numeric_grad(loss, p.data)))
    return max(errs)


def _snap(net) -> dict:
    return {k: v.copy() for k, v in net.state().items()}


def _same(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


class PhaseAuditor(AttackerAwareHooks):
    """Attacker-aware hooks that record, bitwise, which weights each phase touched.

    Phase A runs inside ``after_forward``; everything between two consecutive
    ``after_forward`` calls of one client is Phase B (server step plus client backward).
    """

    def __init__(self, cfg):
        super().__init__(cfg)
        self.server = None
        self.pending = {}
        self.checked_a = self.checked_b = 0
        self.violations: list[str] = []

    def _check_b(self, client) -> None:
        d_prev, c_prev, s_prev = self.pending.pop(client.id)
        if not _same(d_prev, _snap(client.inversion)):
            self.violations.append(f"phase B changed D of client {client.id}")
        if _same(c_prev, _snap(client.model)) or _same(s_prev, _snap(self.server.model)):
            self.violations.append(f"phase B left C or S of client {client.id} unchanged")
        self.checked_b += 1

    def after_forward(self, client, activation, images):
        if client.id in self.pending:
            self._check_b(client)
        c0, s0, d0 = _snap(client.model), _snap(self.server.model), _snap(client.inversion)
        super().after_forward(client, activation, images)
        if not (_same(c0, _snap(client.model)) and _same(s0, _snap(self.server.model))):
            self.violations.append(f"phase A changed C or S of client {client.id}")
        if _same(d0, _snap(client.inversion)):
            self.violations.append(f"phase A left D of client {client.id} unchanged")
        self.checked_a += 1
        self.pending[client.id] = (_snap(client.inversion), _snap(client.model), _snap(self.server.model))


def audited_aware_epoch(model, train, val, cfg, num_clients: int = 1, seed: int = 0) -> PhaseAuditor:
    """One attacker-aware SFL epoch with every phase audited (update_freq must be 1)."""
    hooks = PhaseAuditor(cfg)
    clients = make_clients(model, train, SFLConfig(num_clients=num_clients, epochs=1), seed)
    server = ServerState(copy.deepcopy(model.server), 0.05, 1, clip_norm=2.0)
    hooks.server = server
    for c in clients:
        hooks.setup_client(c, model, seed)
    sfl_train_epoch(clients, server, hooks, SFLConfig(num_clients=num_clients, epochs=1), val)
    return hooks
