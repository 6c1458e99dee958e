import numpy as np
import pytest

from ressfl.data import partition_clients, synth_dataset, train_val_split
from ressfl.errors import ConfigError, PrivacyViolation, ShapeError
from ressfl.losses import cross_entropy
from ressfl.models import DEFAULT_ARCH, build_split_classifier
from ressfl.optim import SGD, step_decay_lr
from ressfl.sfl import (SERVER_VISIBLE, ClientState, SFLConfig, ServerState, client_forward, federated_average,
                        make_clients, run_sfl, sample_clients, sfl_train_epoch)


@pytest.fixture(scope="module")
def data():
    return train_val_split(synth_dataset(200, 10, (1, 16, 16), seed=5), 0.2, seed=5)


def _model(seed=0, shape=(1, 16, 16)):
    return build_split_classifier(DEFAULT_ARCH, 2, shape, 10, seed)


def test_federated_average_examples():
    rng = np.random.default_rng(0)
    r = {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
    out = federated_average([r, {k: v.copy() for k, v in r.items()}, {k: v.copy() for k, v in r.items()}])
    assert all(np.array_equal(out[k], r[k]) for k in r)
    out = federated_average([{"w": np.zeros(5)}, {"w": np.full(5, 2.0)}])
    assert np.array_equal(out["w"], np.ones(5))
    reps = [{"w": rng.normal(size=6)} for _ in range(4)]
    once = federated_average(reps)
    again = federated_average([once] * 4)
    assert np.array_equal(once["w"], again["w"])
    with pytest.raises(ShapeError):
        federated_average([{"w": np.zeros(2)}, {"w": np.zeros(3)}])


def test_sample_clients_examples():
    rng = np.random.default_rng(1)
    clients = list(range(100))
    assert sample_clients(list(range(7)), 1.0, rng) == list(range(7))
    picked = sample_clients(clients, 0.1, rng)
    assert len(picked) == 10 and len(set(picked)) == 10
    assert len(sample_clients([0, 1, 2], 0.5, rng)) == 2
    with pytest.raises(ConfigError):
        sample_clients(clients, 0.0, rng)


def test_client_forward_shapes_and_privacy(data):
    train, _ = data
    m = build_split_classifier(DEFAULT_ARCH, 2, (1, 16, 16), 10)
    clients = make_clients(m, train, SFLConfig(num_clients=2), seed=0)
    c0, c1 = clients
    act, _, _ = client_forward(c0, c0.shard[:4])
    assert act.shape == (4, 16, 4, 4)
    again, _, _ = client_forward(c0, c0.shard[:4])
    assert np.array_equal(act, again)
    with pytest.raises(PrivacyViolation):
        client_forward(c0, c1.shard[:2])


def test_zero_weight_client_gives_zero_activation(data):
    train, _ = data
    m = _model()
    for p in m.client.parameters():
        p.data[:] = 0
    clients = make_clients(m, train, SFLConfig(num_clients=1), seed=0)
    act, _, _ = client_forward(clients[0], clients[0].shard[:3])
    assert not act.any()


def test_activation_log_is_append_only_and_tagged(data):
    train, val = data
    hist, clients, server = run_sfl(_model(), train, val, SFLConfig(num_clients=2, epochs=2), seed=0,
                                    record_epochs=[1, 2])
    assert [e.epoch for e in server.activation_log] == sorted(e.epoch for e in server.activation_log)
    assert {e.client for e in server.activation_log} == {0, 1}
    idx, acts = hist.activations[2]
    assert len(idx) == len(train) and acts.shape == (len(train), 16, 4, 4)


def test_server_sees_only_allowed_messages(data):
    train, val = data
    _, _, server = run_sfl(_model(), train, val, SFLConfig(num_clients=3, epochs=2), seed=0)
    kinds = {k for k, _, _ in server.audit}
    assert kinds <= SERVER_VISIBLE
    with pytest.raises(PrivacyViolation):
        server._record("images", 0)


def _centralized(train, seed, epochs, batch_size, lr, momentum):
    """Reference: ordinary minibatch training of the unsplit network with one optimizer."""
    m = _model(seed)
    net = m.full()
    opt = SGD(net.parameters(), lr=lr, momentum=momentum)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1, 0]))
    for ep in range(epochs):
        opt.lr = step_decay_lr(lr, ep, epochs)
        perm = rng.permutation(len(train))
        for i in range(0, len(train), batch_size):
            b = perm[i:i + batch_size]
            _, g = cross_entropy(net.forward(train.images[b]), train.labels[b])
            net.backward(g)
            opt.step()
    return m


def test_one_client_equals_centralized(data):
    train, val = data
    ref = _centralized(train, 3, 5, 32, 0.05, 0.9)
    cfg = SFLConfig(num_clients=1, epochs=5, clip_norm=None)
    _, clients, server = run_sfl(_model(3), train, val, cfg, seed=3)
    for a, b in zip(clients[0].model.parameters() + server.model.parameters(),
                    ref.client.parameters() + ref.server.parameters()):
        assert np.array_equal(a.data, b.data)


def test_identical_clients_average_to_replica(data):
    train, _ = data
    m = _model()
    cfg = SFLConfig(num_clients=2, epochs=1)
    shard = np.arange(40)
    clients = [ClientState(i, m.client.copy() if hasattr(m.client, "copy") else __import__("copy").deepcopy(m.client),
                           shard, train.subset(shard), np.random.default_rng(7), 0.05,
                           SGD([], lr=0.05)) for i in range(2)]
    for c in clients:
        c.optimizer = SGD(c.model.parameters(), lr=0.05)
    server = ServerState(__import__("copy").deepcopy(m.server), 0.05, 2)
    sfl_train_epoch(clients, server, cfg=cfg)
    # both replicas saw the same data in the same order, but the shared server moved between them;
    # the average must still be exactly the mean
    avg = federated_average([c.model.state() for c in clients])
    for k in avg:
        assert np.allclose(avg[k], (clients[0].model.state()[k] + clients[1].model.state()[k]) / 2)


def test_loss_decreases(data):
    train, val = data
    hist, _, _ = run_sfl(_model(), train, val, SFLConfig(num_clients=2, epochs=8), seed=1)
    assert hist.epochs[-1].train_loss < hist.epochs[0].train_loss
    assert all(0 <= e.val_accuracy <= 100 for e in hist.epochs)


def test_sampling_uses_only_participants(data):
    train, val = data
    cfg = SFLConfig(num_clients=10, epochs=3, sampling_rate=0.2, batch_size=8)
    _, clients, server = run_sfl(_model(), train, val, cfg, seed=2)
    assert len(server.fresh) == 2
    per_epoch = {}
    for kind, cid, ep in server.audit:
        if kind == "activation":
            per_epoch.setdefault(ep, set()).add(cid)
    assert all(len(s) == 2 for s in per_epoch.values())


def test_threads_match_single_thread(data):
    train, val = data
    cfg = SFLConfig(num_clients=3, epochs=2)
    h1, c1, s1 = run_sfl(_model(), train, val, cfg, seed=4, record_epochs=[2])
    h2, c2, s2 = run_sfl(_model(), train, val, cfg, seed=4, record_epochs=[2], threads=3)
    for a, b in zip(s1.model.parameters(), s2.model.parameters()):
        assert np.array_equal(a.data, b.data)
    assert all(np.array_equal(h1.snapshots[2][k], h2.snapshots[2][k]) for k in h1.snapshots[2])
    assert np.array_equal(h1.activations[2][1], h2.activations[2][1])


def test_epoch_beyond_total_is_error(data):
    train, val = data
    cfg = SFLConfig(num_clients=1, epochs=1)
    _, clients, server = run_sfl(_model(), train, val, cfg, seed=0)
    with pytest.raises(ConfigError):
        sfl_train_epoch(clients, server, cfg=cfg)


def test_shards_partition_training_set(data):
    train, _ = data
    clients = make_clients(_model(), train, SFLConfig(num_clients=3), seed=0)
    allidx = np.sort(np.concatenate([c.shard for c in clients]))
    assert np.array_equal(allidx, np.arange(len(train)))
    assert [list(c.shard) for c in clients] == [list(s) for s in partition_clients(len(train), 3, 0)]
