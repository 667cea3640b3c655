from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from frlinv.envs import RIGHT, Transition, generate_dataset, gridlake_spec, make_env, pointmass_spec
from frlinv.errors import ProtocolError, ShapeError
from frlinv.frl import (
    AgentState,
    FederationConfig,
    GradientPacket,
    NetSnapshot,
    agent_round,
    aggregate,
    apply_update,
    evaluate_policy,
    initial_snapshot,
    q_spec,
    run_federation,
    split_shards,
    td_loss,
    td_param_grad,
)
from frlinv.numcore import MlpSpec, QNetwork, flatten, forward

from oracles import td_grad_manual


def linear_pointmass_net(seed=0):
    spec = pointmass_spec()
    net = QNetwork.init(q_spec(spec, hidden_dims=()), seed)
    return spec, net


def test_td_loss_pencil_arithmetic_linear_net():
    spec = pointmass_spec()
    w, b = np.array([[0.5, -0.25, 1.0, 0.2]]), np.array([0.1])
    net = QNetwork(MlpSpec(4, (), 1), flatten([(w, b)]))
    tw, tb = np.array([[0.3, 0.1, -0.4, 0.6]]), np.array([-0.2])
    tgt = QNetwork(MlpSpec(4, (), 1), flatten([(tw, tb)]))
    s, a = np.array([0.2, -0.6]), np.array([1.0, 0.0])
    tr = make_env(spec).step(s, a, np.random.default_rng(0))
    # Q(s,a) = 0.5*0.2 - 0.25*(-0.6) + 1.0*1.0 + 0.2*0 + 0.1 = 1.35
    q = 1.35
    # s' = 0.9 s + 0.1 a = (0.28, -0.54); r = -0.5 (0.28^2 + 0.54^2)
    r = -0.5 * (0.28**2 + 0.54**2)
    # Target is linear in a', so the max over {-1,0,1}^2 takes a' = (-1, 1).
    boot = 0.3 * 0.28 + 0.1 * (-0.54) + (-0.4) * (-1.0) + 0.6 * 1.0 - 0.2
    y = r + 0.9 * boot
    assert td_loss(net, tgt, [tr], 0.9, spec) == pytest.approx(0.5 * (q - y) ** 2, rel=1e-12)


def test_td_loss_zero_when_q_equals_target():
    spec = gridlake_spec()
    env = make_env(spec)
    qs = q_spec(spec, hidden_dims=())
    # All-zero weights and bias 0: Q = 0 everywhere, and the only reward is at the goal.
    net = QNetwork(qs, np.zeros(qs.param_count))
    batch = [env.step(env.state_of((0, 0)), RIGHT, np.random.default_rng(0))]
    assert td_loss(net, net, batch, 0.9, spec) == 0.0
    assert np.all(td_param_grad(net, net, batch, 0.9, spec) == 0.0)


def test_terminal_target_is_reward():
    spec = gridlake_spec()
    env = make_env(spec)
    net = QNetwork.init(q_spec(spec, (8,)), 3)
    tgt = QNetwork.init(q_spec(spec, (8,)), 4)
    tr = env.step(env.state_of((3, 2)), RIGHT, np.random.default_rng(0))
    assert tr.done and tr.r == 1.0
    q = forward(net, env.features(tr.s))[RIGHT]
    assert td_loss(net, tgt, [tr], 0.9, spec) == pytest.approx(0.5 * (q - 1.0) ** 2, rel=1e-13)


def test_td_grad_matches_hand_backprop_discrete():
    spec = gridlake_spec()
    env = make_env(spec)
    data = generate_dataset(spec, "uniform", 40, 2, exploring_starts=True)
    qs = q_spec(spec, (6,))
    net, tgt = QNetwork.init(qs, 1), QNetwork.init(qs, 2)
    batch = list(data.transitions[:5])
    X = env.features(np.stack([t.s for t in batch]))
    mask = np.eye(4)[[t.a for t in batch]]
    Xn = [env.features(t.s_next[None]) for t in batch]
    cont = [0.0 if t.done else 1.0 for t in batch]
    loss, g = td_grad_manual((8, 6, 4), net.params, tgt.params, X, mask, [t.r for t in batch], Xn, cont, 0.9)
    assert td_loss(net, tgt, batch, 0.9, spec) == pytest.approx(loss, rel=1e-12)
    assert np.allclose(td_param_grad(net, tgt, batch, 0.9, spec), g, rtol=1e-10, atol=1e-14)


def test_td_grad_matches_hand_backprop_continuous():
    spec = pointmass_spec()
    env = make_env(spec)
    data = generate_dataset(spec, "uniform", 10, 5)
    qs = q_spec(spec, (5,))
    net, tgt = QNetwork.init(qs, 1), QNetwork.init(qs, 2)
    batch = list(data.transitions[:4])
    X = np.stack([np.concatenate([t.s, t.a]) for t in batch])
    mask = np.ones((4, 1))
    Xn = [np.concatenate([np.repeat(t.s_next[None], 9, 0), env.action_grid], axis=1) for t in batch]
    loss, g = td_grad_manual((4, 5, 1), net.params, tgt.params, X, mask, [t.r for t in batch], Xn, [1.0] * 4, 0.9)
    assert td_loss(net, tgt, batch, 0.9, spec) == pytest.approx(loss, rel=1e-12)
    assert np.allclose(td_param_grad(net, tgt, batch, 0.9, spec), g, rtol=1e-10, atol=1e-14)


def test_td_shape_errors():
    spec = gridlake_spec()
    net = QNetwork.init(MlpSpec(3, (), 4), 0)
    tr = make_env(spec).step(np.zeros(2), 0, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        td_loss(net, net, [tr], 0.9, spec)
    with pytest.raises(ShapeError):
        td_loss(net, net, [], 0.9, spec)


def _shard_setup(batch_size, seed=0):
    spec = gridlake_spec()
    data = generate_dataset(spec, "uniform", 60, seed, exploring_starts=True)
    cfg = FederationConfig(n_agents=1, rounds=1, local_batch_size=batch_size, seed=seed, hidden_dims=(8,))
    return spec, data, cfg, initial_snapshot(spec, cfg)


def test_agent_round_single_sample_and_determinism():
    spec, data, cfg, snap = _shard_setup(1)
    p1, _ = agent_round(AgentState(0, 4, snap), data, cfg)
    p2, _ = agent_round(AgentState(0, 4, snap), data, cfg)
    assert p1.to_json() == p2.to_json()
    matches = [np.array_equal(p1.grad, td_param_grad(snap.online, snap.target, [t], 0.9, spec)) for t in data]
    assert any(matches)


def test_agent_round_batch_three_is_mean_of_singles():
    from frlinv.frl import sample_indices
    spec, data, cfg, snap = _shard_setup(3)
    packet, _ = agent_round(AgentState(0, 2, snap), data, cfg)
    idx = sample_indices(cfg.seed, 2, 0, len(data), 3)
    singles = [td_param_grad(snap.online, snap.target, [data[i]], 0.9, spec) for i in idx]
    assert packet.batch_size == 3
    assert np.allclose(packet.grad, np.mean(singles, axis=0), rtol=1e-12, atol=1e-15)


def _packet(g, fp="abc", agent=0):
    return GradientPacket(agent, 0, np.asarray(g, float), 1, fp)


def test_aggregate_examples():
    g = np.random.default_rng(0).normal(size=7)
    assert np.all(aggregate([_packet(g), _packet(-g)]) == 0.0)
    assert np.array_equal(aggregate([_packet(g)]), g)
    gs = np.random.default_rng(1).normal(size=(3, 7))
    expected = [sum(gs[k, i] for k in range(3)) / 3 for i in range(7)]
    assert np.allclose(aggregate([_packet(x) for x in gs]), expected, rtol=1e-14)


@given(st.integers(1, 12), st.integers(0, 2**31))
def test_aggregate_of_copies_is_exact(k, seed):
    g = np.random.default_rng(seed).normal(size=5) * 10 ** np.random.default_rng(seed).uniform(-8, 8)
    assert np.array_equal(aggregate([_packet(g)] * k), g)


def test_aggregate_fingerprint_mismatch():
    with pytest.raises(ProtocolError):
        aggregate([_packet([1.0]), _packet([1.0], fp="other")])
    with pytest.raises(ProtocolError):
        aggregate([])


def test_apply_update():
    net = QNetwork.init(MlpSpec(2, (3,), 1), 0)
    g = np.random.default_rng(0).normal(size=net.param_count)
    assert np.array_equal(apply_update(net, g, 0.0).params, net.params)
    assert np.array_equal(apply_update(net, np.zeros_like(g), 0.1).params, net.params)
    assert np.array_equal(apply_update(net, g, 0.1).params, net.params - 0.1 * g)
    with pytest.raises(ShapeError):
        apply_update(net, g[:-1], 0.1)


def test_packet_validation_and_json():
    with pytest.raises(ShapeError):
        _packet([np.nan])
    with pytest.raises(ShapeError):
        GradientPacket(0, 0, np.ones(2), 0, "x")
    p = _packet([0.1, -2.5, 1e-300])
    assert GradientPacket.from_json(p.to_json()).to_json() == p.to_json()
    assert set(p.to_dict()) == {"agent_id", "round", "batch_size", "net_fingerprint", "grad"}


def test_federation_config_validation():
    with pytest.raises(ValueError):
        FederationConfig(n_agents=0)
    with pytest.raises(ValueError):
        FederationConfig(learning_rate=0.0)


def _fed(rounds, seed=0, **kw):
    spec = gridlake_spec()
    data = generate_dataset(spec, "uniform", 300, seed, exploring_starts=True)
    cfg = FederationConfig(n_agents=3, rounds=rounds, local_batch_size=2, seed=seed, hidden_dims=(8,), **kw)
    return cfg, split_shards(data, 3, seed)


def test_zero_rounds_returns_initial_net():
    cfg, shards = _fed(0)
    res = run_federation(cfg, shards)
    assert res.log == []
    assert np.array_equal(res.net.params, initial_snapshot(shards[0].env, cfg).online.params)


def test_tap_sees_every_packet_without_mutating():
    cfg, shards = _fed(7)
    seen = []

    def tap(packet, snapshot):
        before = packet.digest()
        seen.append((packet, before, snapshot.fingerprint))

    run_federation(cfg, shards, tap=tap)
    assert len(seen) == cfg.n_agents * cfg.rounds
    assert all(p.digest() == d and p.net_fingerprint == fp for p, d, fp in seen)


def test_federation_log_is_deterministic():
    cfg, shards = _fed(20, eval_every=10, eval_episodes=5)
    a = run_federation(cfg, shards).log_csv()
    b = run_federation(cfg, shards).log_csv()
    assert a == b
    assert a.splitlines()[0] == "round,agent_id,td_loss,eval_return"


def test_federation_rejects_wrong_shard_count():
    cfg, shards = _fed(1)
    with pytest.raises(ValueError):
        run_federation(cfg, shards[:2])


@pytest.mark.slow
def test_gridlake_federation_learns_to_reach_goal():
    spec = gridlake_spec()
    data = generate_dataset(spec, "uniform", 3000, 11, exploring_starts=True)
    cfg = FederationConfig(n_agents=3, rounds=2000, local_batch_size=8, learning_rate=0.3, seed=11,
                           hidden_dims=(32, 32))
    res = run_federation(cfg, split_shards(data, 3, 11))
    assert evaluate_policy(res.net, spec, 1000, seed=2024) > 0.8


def test_snapshot_fingerprint_tracks_both_networks():
    spec = gridlake_spec()
    a = QNetwork.init(q_spec(spec), 0)
    b = QNetwork.init(q_spec(spec), 1)
    assert NetSnapshot(a, a, spec).fingerprint != NetSnapshot(a, b, spec).fingerprint
