"""Regularized gradient inversion.

The attacker initialises candidate tuples from N(0, 1) and minimises

    ||grad_theta L_fake - g_real||^2 + lam * (alpha R_s + beta R_r + gamma R_f)

with respect to the candidates.  The gradient of the matching term needs
the gradient of a gradient, which the taped autodiff provides.

Independent reconstructions (different seeds, packets or weights) are
stacked along a leading run axis and optimised together: every run gets
its own copy of the network parameters, so the inner parameter gradient
is computed per run in a single backward pass and the runs never mix.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from frlinv.attack.candidate import VAR_NAMES, CandidateBatch, make_codec
from frlinv.attack.optim import Optimizer, OptimizerConfig
from frlinv.attack.priors import RegWeights, StatePrior, TransitionModel
from frlinv.envs import EnvSpec, Transition
from frlinv.errors import ConfigError, NumericError, ProtocolError, ShapeError
from frlinv.frl import GradientPacket, NetSnapshot, td_loss_tensor
from frlinv.numcore import autodiff as ad
from frlinv.numcore.network import param_layers


@dataclass(frozen=True)
class AttackConfig:
    weights: RegWeights = field(default_factory=RegWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    k_starts: int = 10

    def to_dict(self) -> dict:
        return {"weights": self.weights.to_dict(), "optimizer": self.optimizer.to_dict(), "k_starts": self.k_starts}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(RegWeights.from_dict(d.get("weights", {})), OptimizerConfig.from_dict(d.get("optimizer", {})),
                   int(d.get("k_starts", 10)))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class AttackProblem:
    """One reconstruction task: a leaked packet and what the attacker knows."""

    packet: GradientPacket
    snapshot: NetSnapshot
    weights: RegWeights
    seed: int
    prior: StatePrior | None = None


@dataclass(eq=False)
class ReconstructionResult:
    candidate: CandidateBatch
    decoded: list[Transition]
    loss_trace: np.ndarray
    gme: float
    iterations: int
    wall_time: float
    seed: int
    status: str = "ok"
    diagnostic: str = ""
    config_hash: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "seed": self.seed,
            "status": self.status,
            "diagnostic": self.diagnostic,
            "config_hash": self.config_hash,
            "iterations": self.iterations,
            "gme": self.gme,
            "decoded": [t.to_dict() for t in self.decoded],
            "candidate": {k: np.asarray(v).tolist() for k, v in self.candidate.values.items()},
            "env": self.candidate.env.to_dict(),
            "loss_trace": [float(v) for v in self.loss_trace],
        }
        if include_timing:
            d["wall_time"] = self.wall_time
        return d

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ReconstructionResult":
        d = json.loads(text)
        env = EnvSpec.from_dict(d["env"])
        cand = CandidateBatch(env, {k: np.asarray(v, float) for k, v in d["candidate"].items()})
        return cls(cand, [Transition.from_dict(t) for t in d["decoded"]], np.asarray(d["loss_trace"], float),
                   float(d["gme"]), int(d["iterations"]), float(d.get("wall_time", 0.0)), int(d["seed"]),
                   d["status"], d["diagnostic"], d["config_hash"])


# --------------------------------------------------------------------------- batched objective


class BatchedObjective:
    """The attack objective for ``K`` stacked runs of ``B`` tuples each."""

    def __init__(self, problems: Sequence[AttackProblem], env: EnvSpec, model: TransitionModel | None):
        if not problems:
            raise ValueError("no attack problems")
        self.env = env
        self.codec = make_codec(env)
        self.model = model
        qspec = problems[0].snapshot.online.spec
        self.qspec = qspec
        self.batch = problems[0].packet.batch_size
        for p in problems:
            if p.packet.net_fingerprint != p.snapshot.fingerprint:
                raise ProtocolError("packet fingerprint does not match the network snapshot")
            if p.packet.grad.size != qspec.param_count:
                raise ShapeError(f"packet has {p.packet.grad.size} entries, network has {qspec.param_count}")
            if p.snapshot.online.spec != qspec:
                raise ShapeError("stacked problems must share a network architecture")
            if p.packet.batch_size != self.batch:
                raise ShapeError("stacked problems must share a batch size")
        self.theta = np.stack([p.snapshot.online.params for p in problems])
        theta_t = np.stack([p.snapshot.target.params for p in problems])
        self.target_layers = param_layers(qspec, ad.Tensor(theta_t))
        self.g_real = np.stack([p.packet.grad for p in problems])
        w = np.stack([p.weights.as_array() for p in problems])
        self.w_state, self.w_reward, self.w_dyn = (w[:, 0] * w[:, 3], w[:, 1] * w[:, 3], w[:, 2] * w[:, 3])
        self.use_state = bool(np.any(self.w_state > 0))
        self.use_reward = bool(np.any(self.w_reward > 0))
        self.use_dyn = bool(np.any(self.w_dyn > 0))
        self.mu = None
        if self.use_state:
            if any(p.prior is None for p, ws in zip(problems, self.w_state) if ws > 0):
                raise ConfigError("state regularizer enabled without a state prior")
            dim = env.state_dim
            self.mu = np.stack([p.prior.mu if p.prior is not None else np.zeros(dim) for p in problems])
            if self.mu.shape[1] != dim:
                raise ShapeError("state prior dimension does not match the environment")
        if self.use_dyn and model is None:
            raise ConfigError("dynamics regularizer enabled without a transition model")

    @property
    def k(self) -> int:
        return self.theta.shape[0]

    def matching(self, vs: dict[str, ad.Tensor], create_graph: bool):
        """Per-run gradient-matching loss and the relaxed candidate view."""
        rel = self.codec.relax(vs)
        theta = ad.variable(self.theta)
        loss = td_loss_tensor(param_layers(self.qspec, theta), self.target_layers, self.qspec, self.env,
                              rel.s_feat, rel.a_enc, rel.r, rel.s_next_feat, rel.cont, self.env.discount)
        (g_fake,) = ad.grad(ad.tsum(loss), [theta], create_graph=create_graph)
        match = ad.tsum(ad.square(ad.sub(g_fake, self.g_real)), axis=-1)
        return match, rel

    def regularizers(self, rel) -> dict[str, ad.Tensor]:
        out = {}
        if self.use_state:
            d = ad.sub(rel.s_num, self.mu[:, None, :])
            out["state"] = ad.tsum(ad.square(d), axis=(1, 2))
        if self.use_reward:
            hi = ad.relu(ad.sub(rel.r, self.env.reward_max))
            lo = ad.relu(ad.sub(self.env.reward_min, rel.r))
            out["reward"] = ad.tsum(ad.add(ad.square(hi), ad.square(lo)), axis=1)
        if self.use_dyn:
            pred = self.model.apply(rel.s_feat, rel.a_enc)
            out["dynamics"] = ad.tsum(ad.square(ad.sub(pred, rel.s_next_feat)), axis=(1, 2))
        return out

    def objective(self, vs: dict[str, ad.Tensor], create_graph: bool = True):
        match, rel = self.matching(vs, create_graph)
        obj = match
        regs = self.regularizers(rel)
        for name, weight in (("state", self.w_state), ("reward", self.w_reward), ("dynamics", self.w_dyn)):
            if name in regs:
                obj = ad.add(obj, ad.mul(regs[name], weight))
        return obj, match

    def evaluate(self, values: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        """(objective, matching loss) per run for fixed candidate values."""
        vs = {k: ad.Tensor(np.asarray(v, float)) for k, v in values.items()}
        obj, match = self.objective(vs, create_graph=False)
        return obj.value.copy(), match.value.copy()


# --------------------------------------------------------------------------- optimisation


def _stack(dicts: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    return {k: np.stack([d[k] for d in dicts]) for k in dicts[0]}


def run_attacks(
    problems: Sequence[AttackProblem],
    env: EnvSpec,
    model: TransitionModel | None = None,
    optimizer: OptimizerConfig | None = None,
    init: Sequence[dict[str, np.ndarray]] | None = None,
    config_hash: str = "",
) -> list[ReconstructionResult]:
    """Optimise all ``problems`` together; results come back in input order.

    Each run starts from N(0, 1) draws of ``default_rng(problem.seed)``
    unless ``init`` supplies starting values.  A run whose objective turns
    non-finite is frozen at its last finite iterate and flagged.
    """
    optimizer = optimizer or OptimizerConfig()
    start = time.perf_counter()
    obj_fn = BatchedObjective(problems, env, model)
    codec = obj_fn.codec
    if init is None:
        init = [codec.init(np.random.default_rng(p.seed), obj_fn.batch) for p in problems]
    values = _stack(init)
    opt = Optimizer(optimizer, values)
    k, iters = obj_fn.k, optimizer.max_iterations
    trace = np.zeros((k, iters))
    used = np.full(k, iters)
    active = np.ones(k, dtype=bool)
    for it in range(iters):
        vs = {name: ad.variable(values[name]) for name in VAR_NAMES}
        obj, _ = obj_fn.objective(vs, create_graph=True)
        ov = obj.value
        bad = active & ~np.isfinite(ov)
        if bad.any():
            used[bad] = it
            active &= ~bad
            if not active.any():
                break
        trace[:, it] = ov
        grads = ad.grad(ad.tsum(obj), [vs[n] for n in VAR_NAMES])
        grads = {n: g.value for n, g in zip(VAR_NAMES, grads)}
        if active.all():
            opt.step(values, grads)
            continue
        frozen = {n: values[n][~active].copy() for n in VAR_NAMES}
        for n in VAR_NAMES:
            grads[n][~active] = 0.0
        opt.step(values, grads)
        for n in VAR_NAMES:
            values[n][~active] = frozen[n]
    _, match = obj_fn.evaluate(values)
    elapsed = time.perf_counter() - start
    results = []
    for i, p in enumerate(problems):
        run_vals = {n: values[n][i].copy() for n in VAR_NAMES}
        state = {"t": opt.t, "m": {n: opt.m[n][i].copy() for n in VAR_NAMES}, "v": {n: opt.v[n][i].copy() for n in VAR_NAMES}}
        cand = CandidateBatch(env, run_vals, state)
        status, diag = "ok", ""
        if used[i] < iters:
            status, diag = "nonfinite", f"objective became non-finite at iteration {used[i]}"
        results.append(ReconstructionResult(cand, codec.decode(run_vals), trace[i, : used[i]].copy(), float(match[i]),
                                            int(used[i]), elapsed / k, p.seed, status, diag, config_hash))
    return results


def rgia_attack(
    packet: GradientPacket,
    net_snapshot: NetSnapshot,
    env: EnvSpec,
    weights: RegWeights,
    prior: StatePrior | None,
    model: TransitionModel | None,
    opt_config: OptimizerConfig,
    seed: int,
) -> ReconstructionResult:
    """Reconstruct the tuples behind one packet from a single random start."""
    cfg_hash = AttackConfig(weights, opt_config).digest()
    problem = AttackProblem(packet, net_snapshot, weights, seed, prior)
    return run_attacks([problem], env, model, opt_config, config_hash=cfg_hash)[0]


def total_objective(candidate: CandidateBatch, packet: GradientPacket, net_snapshot: NetSnapshot,
                    weights: RegWeights, prior: StatePrior | None, model: TransitionModel | None,
                    env: EnvSpec) -> float:
    """Objective value of a fixed candidate batch."""
    if candidate.batch_size != packet.batch_size:
        raise ShapeError("candidate and packet batch sizes differ")
    obj_fn = BatchedObjective([AttackProblem(packet, net_snapshot, weights, 0, prior)], env, model)
    obj, _ = obj_fn.evaluate({k: v[None] for k, v in candidate.values.items()})
    return float(obj[0])


def gradient_matching_error(candidate: CandidateBatch, packet: GradientPacket, net_snapshot: NetSnapshot) -> float:
    """||grad_theta L(candidate) - packet.grad||^2."""
    return total_objective(candidate, packet, net_snapshot, RegWeights.gia(), None, None, candidate.env)


def check_finite_results(results: Sequence[ReconstructionResult]) -> None:
    """Raise ``NumericError`` if any run was aborted."""
    bad = [r for r in results if not r.ok]
    if bad:
        raise NumericError(bad[0].diagnostic)
