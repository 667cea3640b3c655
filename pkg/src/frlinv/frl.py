"""Federated TD Q-learning by gradient sharing.

Each round, every agent samples a mini-batch from its private shard,
computes the TD-loss gradient against the current central network and
uploads it as a ``GradientPacket``.  Packets pass through an optional
defense and an optional tap (the attacker's interception point) before the
server averages them and takes a descent step.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from frlinv.envs import Dataset, EnvSpec, Transition, make_env
from frlinv.errors import ProtocolError, ShapeError
from frlinv.numcore import autodiff as ad
from frlinv.numcore.network import MlpSpec, QNetwork, mlp, param_grad, param_layers

# --------------------------------------------------------------------------- Q-function plumbing


def q_spec(env_spec: EnvSpec, hidden_dims=(16,), activation: str = "tanh") -> MlpSpec:
    """Q-network shape for an environment.

    Discrete actions: features -> one value per action.  Continuous actions:
    ``[features, action]`` -> a single value.
    """
    env = make_env(env_spec)
    if env_spec.discrete_actions:
        return MlpSpec(env.feature_dim, tuple(hidden_dims), env_spec.n_actions, activation)
    return MlpSpec(env.feature_dim + env_spec.action_dim, tuple(hidden_dims), 1, activation)


@dataclass(frozen=True)
class EncodedBatch:
    """Network-ready arrays for a list of transitions (leading axis = batch)."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    cont: np.ndarray


def encode_transitions(env, transitions: Sequence[Transition]) -> EncodedBatch:
    spec = env.spec
    s = env.features(np.stack([t.s for t in transitions]))
    s2 = env.features(np.stack([t.s_next for t in transitions]))
    if spec.discrete_actions:
        a = np.eye(spec.n_actions)[[int(t.a) for t in transitions]]
    else:
        a = np.stack([np.asarray(t.a, float) for t in transitions])
    r = np.array([t.r for t in transitions], dtype=np.float64)
    cont = np.array([0.0 if t.done else 1.0 for t in transitions])
    return EncodedBatch(s, a, r, s2, cont)


def q_taken(layers, qspec: MlpSpec, env_spec: EnvSpec, s, a) -> ad.Tensor:
    """Q(s, a) for features ``s`` (..., B, F) and encoded actions ``a``.

    Discrete actions are encoded as weights over actions (one-hot for real
    data, softmax for relaxed candidates).
    """
    if env_spec.discrete_actions:
        return ad.tsum(ad.mul(mlp(layers, s, qspec.activation), a), axis=-1)
    out = mlp(layers, ad.concat([s, a], axis=-1), qspec.activation)
    return ad.reshape(out, out.shape[:-1])


def action_grid(env_spec: EnvSpec) -> np.ndarray:
    return make_env(env_spec).action_grid


def q_max(layers, qspec: MlpSpec, env_spec: EnvSpec, s, grid: np.ndarray | None = None) -> ad.Tensor:
    """max_a' Q(s, a'); continuous actions are maximised over a fixed grid.

    The gradient flows through the selected branch only.
    """
    s = ad.as_tensor(s)
    if env_spec.discrete_actions:
        return ad.select_max(mlp(layers, s, qspec.activation), axis=-1)
    grid = action_grid(env_spec) if grid is None else grid
    n_grid, width = grid.shape[0], s.shape[-1]
    lead = s.shape[:-1]
    # Rows (b, k) pair state b with grid action k; the batch axis is
    # flattened so per-run weights (K, out, in) still broadcast.
    s_rep = ad.broadcast_to(ad.reshape(s, lead + (1, width)), lead + (n_grid, width))
    s_rep = ad.reshape(s_rep, lead[:-1] + (lead[-1] * n_grid, width))
    a_rep = np.broadcast_to(grid, lead + grid.shape).reshape(lead[:-1] + (lead[-1] * n_grid, grid.shape[1]))
    out = mlp(layers, ad.concat([s_rep, a_rep], axis=-1), qspec.activation)
    return ad.select_max(ad.reshape(out, lead + (n_grid,)), axis=-1)


def td_loss_tensor(layers, target_layers, qspec, env_spec, s, a, r, s_next, cont, gamma, grid=None) -> ad.Tensor:
    """Mean over the batch axis of 0.5 (Q(s,a) - y)^2 with y = r + gamma * cont * max Q_target(s', .).

    Leading axes before the batch axis are kept, giving one loss per
    independent problem.  ``y`` never depends on the online parameters.
    """
    q = q_taken(layers, qspec, env_spec, s, a)
    boot = q_max(target_layers, qspec, env_spec, s_next, grid)
    y = ad.add(r, ad.mul(ad.mul(boot, cont), gamma))
    err = ad.sub(q, y)
    return ad.mul(ad.tsum(ad.square(err), axis=-1), 0.5 / q.shape[-1])


def _const_layers(net: QNetwork):
    return [(ad.Tensor(W), ad.Tensor(b)) for W, b in net.layers()]


def td_loss(net: QNetwork, target_net: QNetwork, batch: Sequence[Transition], gamma: float, env_spec: EnvSpec) -> float:
    """Mean TD loss of ``net`` over ``batch`` with bootstrap targets from ``target_net``."""
    if not batch:
        raise ShapeError("batch must be non-empty")
    env = make_env(env_spec)
    enc = encode_transitions(env, batch)
    _check_dims(net, env_spec, enc)
    with ad.no_record():
        loss = td_loss_tensor(_const_layers(net), _const_layers(target_net), net.spec, env_spec,
                              enc.s, enc.a, enc.r, enc.s_next, enc.cont, gamma)
    return float(loss.value)


def _check_dims(net: QNetwork, env_spec: EnvSpec, enc: EncodedBatch) -> None:
    width = enc.s.shape[-1] + (0 if env_spec.discrete_actions else enc.a.shape[-1])
    if width != net.spec.input_dim:
        raise ShapeError(f"network expects {net.spec.input_dim} inputs, batch provides {width}")
    if env_spec.discrete_actions and enc.a.shape[-1] != net.spec.output_dim:
        raise ShapeError("action count does not match network outputs")


def td_param_grad(net: QNetwork, target_net: QNetwork, batch: Sequence[Transition], gamma: float, env_spec: EnvSpec) -> np.ndarray:
    """Gradient of ``td_loss`` with respect to the flat online parameters."""
    if not batch:
        raise ShapeError("batch must be non-empty")
    env = make_env(env_spec)
    enc = encode_transitions(env, batch)
    _check_dims(net, env_spec, enc)
    tgt = _const_layers(target_net)

    def build(layers, _net):
        return td_loss_tensor(layers, tgt, net.spec, env_spec, enc.s, enc.a, enc.r, enc.s_next, enc.cont, gamma)

    return param_grad(net, build)


# --------------------------------------------------------------------------- protocol types


@dataclass(frozen=True, eq=False)
class NetSnapshot:
    """The broadcast central network and its frozen target copy."""

    online: QNetwork
    target: QNetwork
    env: EnvSpec

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256(self.online.params.tobytes())
        h.update(self.target.params.tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class GradientPacket:
    agent_id: int
    round: int
    grad: np.ndarray
    batch_size: int
    net_fingerprint: str
    created_at: float = 0.0
    defense: str | None = None

    def __post_init__(self):
        g = np.array(self.grad, dtype=np.float64)
        if g.ndim != 1 or g.size == 0:
            raise ShapeError("packet gradient must be a non-empty vector")
        if not np.all(np.isfinite(g)):
            raise ShapeError("packet gradient has non-finite entries")
        if self.batch_size < 1:
            raise ShapeError("batch_size must be >= 1")
        g.setflags(write=False)
        object.__setattr__(self, "grad", g)

    def with_grad(self, grad: np.ndarray, defense: str | None) -> "GradientPacket":
        return replace(self, grad=grad, defense=defense)

    def to_dict(self) -> dict:
        d = {
            "agent_id": self.agent_id,
            "round": self.round,
            "batch_size": self.batch_size,
            "net_fingerprint": self.net_fingerprint,
            "grad": [float(v) for v in self.grad],
        }
        if self.defense is not None:
            d["defense"] = self.defense
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "GradientPacket":
        return cls(int(d["agent_id"]), int(d["round"]), np.asarray(d["grad"], float), int(d["batch_size"]),
                   str(d["net_fingerprint"]), defense=d.get("defense"))

    @classmethod
    def from_json(cls, text: str) -> "GradientPacket":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


@dataclass(frozen=True)
class FederationConfig:
    n_agents: int = 3
    rounds: int = 100
    local_batch_size: int = 16
    learning_rate: float = 0.1
    aggregation: str = "mean"
    seed: int = 0
    hidden_dims: tuple[int, ...] = (16,)
    activation: str = "tanh"
    init_scale: float = 1.0
    target_refresh: int = 50
    eval_every: int = 0
    eval_episodes: int = 100

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.local_batch_size < 1:
            raise ValueError("local_batch_size must be >= 1")
        if self.aggregation != "mean":
            raise ValueError("only mean aggregation is supported")
        if self.rounds < 0 or self.target_refresh < 1:
            raise ValueError("rounds must be >= 0 and target_refresh >= 1")
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "FederationConfig":
        return cls(**{k: (tuple(v) if k == "hidden_dims" else v) for k, v in d.items()})


@dataclass(frozen=True, eq=False)
class AgentState:
    agent_id: int
    round: int
    snapshot: NetSnapshot


def initial_snapshot(env_spec: EnvSpec, config: FederationConfig) -> NetSnapshot:
    net = QNetwork.init(q_spec(env_spec, config.hidden_dims, config.activation), config.seed, config.init_scale)
    return NetSnapshot(net, net, env_spec)


def sample_indices(seed: int, round_: int, agent_id: int, shard_size: int, batch_size: int) -> np.ndarray:
    """Indices an agent trains on in a round; replayable for ground truth."""
    rng = np.random.default_rng([seed, round_, agent_id])
    return rng.choice(shard_size, size=batch_size, replace=batch_size > shard_size)


def agent_round(agent_state: AgentState, shard: Dataset, config: FederationConfig) -> tuple[GradientPacket, float]:
    """One agent's upload: TD-loss gradient on a seeded mini-batch of its shard.

    Returns the packet and the batch TD loss.
    """
    if len(shard) == 0:
        raise ValueError("empty shard")
    snap = agent_state.snapshot
    idx = sample_indices(config.seed, agent_state.round, agent_state.agent_id, len(shard), config.local_batch_size)
    batch = [shard[i] for i in idx]
    gamma = snap.env.discount
    grad = td_param_grad(snap.online, snap.target, batch, gamma, snap.env)
    loss = td_loss(snap.online, snap.target, batch, gamma, snap.env)
    packet = GradientPacket(agent_state.agent_id, agent_state.round, grad, len(batch), snap.fingerprint,
                            created_at=time.time())
    return packet, loss


def aggregate(packets: Sequence[GradientPacket]) -> np.ndarray:
    """Element-wise mean of the packet gradients.

    Computed as ``g0 + mean(g_i - g0)`` so that identical packets
    aggregate to exactly themselves.
    """
    if not packets:
        raise ProtocolError("no packets to aggregate")
    fp, n = packets[0].net_fingerprint, packets[0].grad.size
    for p in packets[1:]:
        if p.net_fingerprint != fp:
            raise ProtocolError("packets were computed against different networks")
        if p.grad.size != n:
            raise ProtocolError("packet gradient lengths differ")
    g0 = packets[0].grad
    if len(packets) == 1:
        return g0.copy()
    diff = np.zeros(n)
    for p in packets[1:]:
        diff += p.grad - g0
    return g0 + diff / len(packets)


def apply_update(net: QNetwork, agg_grad, alpha: float) -> QNetwork:
    """Descent step ``params - alpha * grad``."""
    agg_grad = np.asarray(agg_grad, dtype=np.float64)
    if agg_grad.shape != net.params.shape:
        raise ShapeError(f"gradient length {agg_grad.shape} does not match {net.params.shape}")
    return net.with_params(net.params - alpha * agg_grad)


# --------------------------------------------------------------------------- evaluation


def greedy_action(net: QNetwork, env, s):
    feats = env.features(np.asarray(s, float)[None])
    if env.spec.discrete_actions:
        return int(np.argmax(net(feats)[0]))
    grid = env.action_grid
    x = np.concatenate([np.repeat(feats, len(grid), axis=0), grid], axis=1)
    return grid[int(np.argmax(net(x)[:, 0]))]


def evaluate_policy(net: QNetwork, env_spec: EnvSpec, episodes: int, seed: int) -> float:
    """Average undiscounted return of the greedy policy."""
    env = make_env(env_spec)
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(episodes):
        s = env.reset(rng)
        for _t in range(env.horizon):
            tr = env.step(s, greedy_action(net, env, s), rng)
            total += tr.r
            if tr.done:
                break
            s = tr.s_next
    return total / episodes


# --------------------------------------------------------------------------- federation loop

Tap = Callable[[GradientPacket, NetSnapshot], None]
LOG_COLUMNS = ("round", "agent_id", "td_loss", "eval_return")


@dataclass
class FederationResult:
    net: QNetwork
    target: QNetwork
    log: list[dict] = field(default_factory=list)

    def log_csv(self) -> str:
        return log_to_csv(self.log)

    def final_td_loss(self) -> float:
        if not self.log:
            return float("nan")
        last = self.log[-1]["round"]
        return float(np.mean([row["td_loss"] for row in self.log if row["round"] == last]))

    def final_eval_return(self) -> float:
        evals = [row["eval_return"] for row in self.log if row["eval_return"] is not None]
        return float(evals[-1]) if evals else float("nan")


def log_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for row in rows:
        ev = row["eval_return"]
        w.writerow([row["round"], row["agent_id"], repr(float(row["td_loss"])), "" if ev is None else repr(float(ev))])
    return buf.getvalue()


def run_federation(
    config: FederationConfig,
    shards: Sequence[Dataset],
    defense=None,
    tap: Tap | None = None,
    initial: NetSnapshot | None = None,
) -> FederationResult:
    """Run ``config.rounds`` rounds of gradient sharing.

    ``defense`` (a ``DefenseSpec``) is applied to each uploaded packet before
    ``tap`` sees it.  The target network is refreshed every
    ``config.target_refresh`` rounds.
    """
    if len(shards) != config.n_agents:
        raise ValueError(f"expected {config.n_agents} shards, got {len(shards)}")
    env_spec = shards[0].env
    snap = initial if initial is not None else initial_snapshot(env_spec, config)
    net, target = snap.online, snap.target
    log: list[dict] = []
    for rnd in range(config.rounds):
        snap = NetSnapshot(net, target, env_spec)
        packets, losses = [], []
        for agent_id, shard in enumerate(shards):
            packet, loss = agent_round(AgentState(agent_id, rnd, snap), shard, config)
            if defense is not None:
                packet = defense.apply(packet, agent_id=agent_id, round_=rnd)
            if tap is not None:
                tap(packet, snap)
            packets.append(packet)
            losses.append(loss)
        net = apply_update(net, aggregate(packets), config.learning_rate)
        if (rnd + 1) % config.target_refresh == 0:
            target = net
        ev = None
        if config.eval_every and ((rnd + 1) % config.eval_every == 0 or rnd + 1 == config.rounds):
            ev = evaluate_policy(net, env_spec, config.eval_episodes, seed=config.seed + 7919 * (rnd + 1))
        for agent_id, loss in enumerate(losses):
            log.append({"round": rnd, "agent_id": agent_id, "td_loss": loss, "eval_return": ev})
    return FederationResult(net, target, log)


def split_shards(dataset: Dataset, n_agents: int, seed: int) -> list[Dataset]:
    """Random disjoint split of a dataset into ``n_agents`` shards."""
    perm = np.random.default_rng(seed).permutation(len(dataset))
    return [dataset.subset(part.tolist()) for part in np.array_split(perm, n_agents)]


def write_log(result: FederationResult, path) -> None:
    Path(path).write_text(result.log_csv())
