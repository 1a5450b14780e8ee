import numpy as np
import pytest

from pdmtl import topology as topo
from pdmtl.datagen import make_dataset, partition_for_clients
from pdmtl.nn import ConfigurationError, encoder_head_grads
from pdmtl.trainer import (
    RunConfig,
    Trainer,
    build_trainer,
    gossip_round,
    init_clients,
    local_encoder_step,
    local_head_update,
    mix_encoders,
    run_experiment,
)

SMALL = dict(encoder_dims=[10, 8, 6], steps_per_epoch=2, batch_size=16, shared_batch_size=32)


def small_config(**kw):
    base = dict(SMALL, data=None)
    base.update(kw)
    data = base.pop("data")
    cfg = RunConfig(**base)
    cfg.data.n_train, cfg.data.n_test, cfg.data.n_shared = 400, 100, 100
    if data:
        for k, v in data.items():
            setattr(cfg.data, k, v)
    return cfg.validate()


def tiny_clients(n=4, seed=0, dims=(10, 8, 6)):
    ds = make_dataset(n_train=200, n_test=50, n_shared=50, seed=seed)
    cfg = RunConfig(encoder_dims=list(dims), seed=seed, batch_size=16)
    return init_clients(partition_for_clients(ds, n), cfg), ds


def silence_heads(clients):
    """Zero head weights make every encoder gradient exactly zero."""
    for c in clients:
        c.head.params = np.zeros_like(c.head.params)


def scramble_encoders(clients, seed):
    rng = np.random.default_rng(seed)
    for c in clients:
        c.encoder.params = c.encoder.params + rng.normal(size=c.encoder.n_params)


def random_doubly_stochastic(n, rng):
    mats = []
    for _ in range(rng.integers(1, 4)):
        labels = rng.integers(0, rng.integers(1, n + 1), size=n)
        mats.append(topo.mixing_from_clusters(topo.canonical_partition(labels), n))
    return topo.average_mixing(mats).w


def batches_for(clients):
    return [c.batches.next() for c in clients]


def test_clients_share_encoder_init_not_heads():
    clients, _ = tiny_clients()
    for c in clients[1:]:
        assert np.array_equal(c.encoder.params, clients[0].encoder.params)
        assert c.encoder.params is not clients[0].encoder.params
    assert not np.array_equal(clients[0].head.params, clients[1].head.params)
    assert all(c.head.output_dim == 2 for c in clients)


def test_head_update_leaves_encoder_bits():
    clients, _ = tiny_clients()
    c = clients[0]
    before = c.encoder.params.tobytes()
    head_before = c.head.params.copy()
    local_head_update(c, c.batches.next(), lr=1e-3, k1=3)
    assert c.encoder.params.tobytes() == before
    assert not np.array_equal(c.head.params, head_before)


def test_head_update_k1_one_matches_manual_adam():
    clients, _ = tiny_clients()
    c = clients[2]
    x, y = c.batches.next()
    _, _, g = encoder_head_grads(c.encoder, c.head, x, y, encoder_grad=False)
    lr, b1, b2, eps = 2e-5, 0.9, 0.999, 1e-8
    m, v = (1 - b1) * g, (1 - b2) * g * g
    expected = c.head.params - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
    local_head_update(c, (x, y), lr, k1=1)
    np.testing.assert_allclose(c.head.params, expected, rtol=0, atol=1e-15)
    assert c.adam_head.step_count == 1


def test_empty_batch_rejected():
    clients, _ = tiny_clients()
    empty = (np.zeros((0, 10)), np.zeros(0, dtype=np.int64))
    with pytest.raises(ConfigurationError):
        local_head_update(clients[0], empty, 1e-3)
    with pytest.raises(ConfigurationError):
        local_encoder_step(clients[0], empty, 1e-3)


def test_gossip_never_touches_heads():
    clients, _ = tiny_clients()
    heads = [c.head.params.tobytes() for c in clients]
    gossip_round(clients, topo.uniform_mixing(4), batches_for(clients), 1e-3)
    assert [c.head.params.tobytes() for c in clients] == heads


def test_identity_mixing_is_pure_local_step():
    clients, _ = tiny_clients()
    twins, _ = tiny_clients()
    batches = batches_for(clients)
    gossip_round(clients, np.eye(4), batches, 1e-3)
    for c, t, b in zip(clients, twins, batches):
        local_encoder_step(t, b, 1e-3)
        assert np.array_equal(c.encoder.params, t.encoder.params)


def test_uniform_mixing_zero_gradient_consensus_in_one_round():
    clients, _ = tiny_clients()
    silence_heads(clients)
    scramble_encoders(clients, 1)
    mean = np.mean([c.encoder.params for c in clients], axis=0)
    gossip_round(clients, topo.uniform_mixing(4), batches_for(clients), 1e-3)
    for c in clients:
        np.testing.assert_allclose(c.encoder.params, mean, rtol=0, atol=1e-12)
    spread = np.ptp(np.stack([c.encoder.params for c in clients]), axis=0)
    assert spread.max() <= 1e-12


def test_zero_gradient_mean_preserved_for_random_block_matrices():
    clients, _ = tiny_clients()
    silence_heads(clients)
    rng = np.random.default_rng(7)
    for trial in range(100):
        scramble_encoders(clients, trial)
        w = random_doubly_stochastic(4, rng)
        before = np.mean([c.encoder.params for c in clients], axis=0)
        gossip_round(clients, w, batches_for(clients), 1e-3)
        after = np.mean([c.encoder.params for c in clients], axis=0)
        assert np.max(np.abs(after - before)) <= 1e-12


def test_variance_non_increasing_under_lazy_single_cluster():
    clients, _ = tiny_clients()
    silence_heads(clients)
    scramble_encoders(clients, 3)
    w = 0.5 * np.eye(4) + 0.5 * topo.uniform_mixing(4).w
    var = np.var(np.stack([c.encoder.params for c in clients]), axis=0)
    for _ in range(5):
        gossip_round(clients, w, batches_for(clients), 1e-3)
        nxt = np.var(np.stack([c.encoder.params for c in clients]), axis=0)
        assert np.all(nxt <= var + 1e-15)
        var = nxt
    assert var.max() < 1e-2


def test_mix_rejects_non_stochastic():
    clients, _ = tiny_clients()
    bad = np.full((4, 4), 0.3)
    with pytest.raises(topo.StochasticityError):
        mix_encoders(clients, bad)
    with pytest.raises(topo.StochasticityError):
        gossip_round(clients, bad, batches_for(clients), 1e-3)


def test_smoke_two_clients_one_epoch():
    cfg = small_config(n_clients=2, epochs=1, topology_mode="fully_connected")
    ds = make_dataset(n_train=400, n_test=100, n_shared=100, tracked_coords=(0, 1), seed=0)
    m = run_experiment(cfg, ds)
    assert len(m.epochs) == 1
    rec = m.epochs[0]
    assert len(rec.test_loss) == 2 and len(rec.train_loss) == 2
    assert np.all(np.isfinite(rec.test_loss))
    np.testing.assert_array_equal(rec.w, np.full((2, 2), 0.5))
    assert rec.z is None


def test_client_count_must_match_tasks():
    cfg = small_config(n_clients=3)
    with pytest.raises(ConfigurationError):
        build_trainer(cfg)


def test_fully_connected_equals_fixed_uniform():
    a = run_experiment(small_config(epochs=3, topology_mode="fully_connected"))
    b = run_experiment(small_config(epochs=3, topology_mode="fixed", fixed_w=(np.ones((4, 4)) / 4).tolist()))
    np.testing.assert_array_equal(a.loss_array("test"), b.loss_array("test"))
    np.testing.assert_array_equal(a.loss_array("train"), b.loss_array("train"))


def test_same_seed_same_metrics_different_seed_differs():
    a = run_experiment(small_config(epochs=6, seed=4))
    b = run_experiment(small_config(epochs=6, seed=4))
    c = run_experiment(small_config(epochs=6, seed=5))
    np.testing.assert_array_equal(a.loss_array(), b.loss_array())
    for ra, rb in zip(a.epochs, b.epochs):
        assert ra.topology_dict() == rb.topology_dict()
    assert not np.array_equal(a.loss_array(), c.loss_array())


def test_dynamic_starts_fully_connected():
    m = run_experiment(small_config(epochs=5, steps_per_epoch=1))
    for rec in m.epochs[:4]:
        np.testing.assert_array_equal(rec.w, topo.uniform_mixing(4).w)
        assert not rec.window_closed
        assert rec.z is not None and rec.z.shape == (4, 4)
    assert m.epochs[4].window_closed
    assert [e for e, _ in m.window_partitions()] == [5]


def test_freeze_epoch_pins_topology():
    m = run_experiment(small_config(epochs=28, steps_per_epoch=1, topology_freeze_epoch=21, transference_scale=50.0))
    pinned = m.epochs[20].w
    for rec in m.epochs[20:]:
        np.testing.assert_array_equal(rec.w, pinned)
        assert rec.z is None
    assert m.epochs[19].window_closed
    assert not any(r.window_closed for r in m.epochs[20:])


def test_average_z_mode_produces_block_matrix():
    m = run_experiment(small_config(epochs=10, steps_per_epoch=1, averaging="average_Z"))
    for e, _ in m.window_partitions():
        w = m.epochs[e - 1].w
        np.testing.assert_allclose(w @ w, w, atol=1e-12)


def test_every_recorded_w_doubly_stochastic():
    m = run_experiment(small_config(epochs=15, steps_per_epoch=1, transference_scale=20.0))
    for rec in m.epochs:
        topo.check_doubly_stochastic(rec.w, 1e-9)


def test_trainer_rejects_wrong_view_count():
    cfg = small_config()
    ds = make_dataset(n_train=100, n_test=20, n_shared=20)
    views = partition_for_clients(ds, 4)[:3]
    with pytest.raises(ConfigurationError):
        Trainer(cfg, views, ds.shared.x, ds.shared.labels)


@pytest.mark.parametrize(
    "field,value",
    [("k1", 0), ("k2", 0), ("h", 0), ("epochs", 0), ("lr", 0.0), ("topology_mode", "ring"), ("averaging", "mean")],
)
def test_config_validation_names_field(field, value):
    cfg = RunConfig()
    setattr(cfg, field, value)
    with pytest.raises(ConfigurationError, match=field):
        cfg.validate()


def test_fixed_mode_validates_w():
    with pytest.raises(ConfigurationError, match="fixed_w"):
        RunConfig(topology_mode="fixed").validate()
    with pytest.raises(ConfigurationError, match="fixed_w"):
        RunConfig(topology_mode="fixed", fixed_w=[[0.6, 0.6, 0, 0]] * 4).validate()
