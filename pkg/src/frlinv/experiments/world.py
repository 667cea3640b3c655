"""Shared experiment scaffolding: data, attacker knowledge, leaked packets, scoring."""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from frlinv import metrics
from frlinv.attack.engine import AttackProblem, ReconstructionResult, run_attacks
from frlinv.attack.optim import OptimizerConfig
from frlinv.attack.priors import StatePrior, TransitionModel, estimate_state_prior, prior_count, train_transition_model
from frlinv.defenses import DefenseSpec
from frlinv.envs import Dataset, EnvSpec, Transition, generate_dataset, make_env
from frlinv.errors import ConfigError
from frlinv.experiments.config import ExperimentConfig
from frlinv.frl import AgentState, FederationConfig, GradientPacket, NetSnapshot, agent_round, initial_snapshot, \
    sample_indices, split_shards

MODEL_DATA_SEED = 10_000
REWARD_TOL = 1e-3
EXACT_TOL = 1e-3
MAX_BATCH_RUNS = 1000


@dataclass(frozen=True, eq=False)
class World:
    """What one experiment seed sees: private data and the attacker's side knowledge."""

    env: EnvSpec
    seed: int
    dataset: Dataset
    shards: list[Dataset]
    prior: StatePrior
    model: TransitionModel


@dataclass(frozen=True, eq=False)
class Leak:
    """A packet intercepted by the attacker plus the tuples that produced it."""

    packet: GradientPacket
    snapshot: NetSnapshot
    truth: list[Transition]


def build_dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    return generate_dataset(cfg.env, "uniform", cfg.data_size, seed, exploring_starts=True)


@functools.lru_cache(maxsize=32)
def _cached_model(env_json: str, size: int, epochs: int) -> TransitionModel:
    env = EnvSpec.from_dict(json.loads(env_json))
    data = generate_dataset(env, "uniform", size, MODEL_DATA_SEED, exploring_starts=True)
    return train_transition_model(data, epochs=epochs, seed=0)


def build_model(cfg: ExperimentConfig, size: int | None = None) -> TransitionModel:
    """Attacker's dynamics model, fitted on its own rollouts (shared by all seeds)."""
    return _cached_model(json.dumps(cfg.env.to_dict(), sort_keys=True), int(size or cfg.model_data_size),
                         cfg.model_epochs)


def build_prior(cfg: ExperimentConfig, dataset: Dataset, seed: int, size=None) -> StatePrior:
    if size is None:
        size = cfg.prior_size if cfg.prior_size is not None else prior_count(len(dataset))
    if size == "all":
        size = len(dataset)
    return estimate_state_prior(dataset, int(size), seed)


def build_world(cfg: ExperimentConfig, seed: int) -> World:
    data = build_dataset(cfg, seed)
    return World(cfg.env, seed, data, split_shards(data, cfg.federation.n_agents, seed),
                 build_prior(cfg, data, seed), build_model(cfg))


def federation_for(cfg: ExperimentConfig, seed: int, batch: int | None = None, **changes) -> FederationConfig:
    kw = {"seed": seed, **changes}
    if batch is not None:
        kw["local_batch_size"] = batch
    return replace(cfg.federation, **kw)


def leak_packets(
    world: World,
    fed: FederationConfig,
    n: int,
    defense: DefenseSpec | None = None,
    distinct: bool = False,
    snapshot: NetSnapshot | None = None,
    round_: int = 0,
) -> list[Leak]:
    """Uploads of agents ``0, 1, ...`` in one round, captured before aggregation.

    With ``distinct`` an upload is skipped when its true next states repeat
    an earlier one (identical uploads would make packet-identity clusters
    coincide).  Fewer than ``n`` leaks come back if the agents run out.
    """
    if n > fed.n_agents:
        raise ConfigError(f"cannot leak {n} packets from {fed.n_agents} agents")
    snap = snapshot if snapshot is not None else initial_snapshot(world.env, fed)
    leaks, seen = [], set()
    for agent in range(fed.n_agents):
        packet, _ = agent_round(AgentState(agent, round_, snap), world.shards[agent], fed)
        if defense is not None:
            packet = defense.apply(packet, agent_id=agent, round_=round_)
        idx = sample_indices(fed.seed, round_, agent, len(world.shards[agent]), fed.local_batch_size)
        truth = [world.shards[agent][i] for i in idx]
        key = tuple(np.asarray(t.s_next).tobytes() for t in truth)
        if distinct and key in seen:
            continue
        seen.add(key)
        leaks.append(Leak(packet, snap, truth))
        if len(leaks) == n:
            break
    return leaks


# --------------------------------------------------------------------------- batched attack jobs


@dataclass(frozen=True, eq=False)
class Job:
    leak: Leak
    weights: object
    start_seed: int
    prior: StatePrior | None
    model: TransitionModel | None = None
    tags: tuple = ()


def run_jobs(jobs: Sequence[Job], env: EnvSpec, optimizer: OptimizerConfig, config_hash: str = "",
             default_model: TransitionModel | None = None) -> list[ReconstructionResult]:
    """Run independent attacks, vectorised over compatible groups.

    Jobs sharing a batch size and a dynamics model are optimised together
    (at most ``MAX_BATCH_RUNS`` at a time); results keep input order.
    """
    results: list[ReconstructionResult | None] = [None] * len(jobs)
    groups: dict[tuple, list[int]] = {}
    for i, j in enumerate(jobs):
        model = j.model or default_model
        groups.setdefault((j.leak.packet.batch_size, id(model)), []).append(i)
    for idx in groups.values():
        model = jobs[idx[0]].model or default_model
        for lo in range(0, len(idx), MAX_BATCH_RUNS):
            chunk = idx[lo:lo + MAX_BATCH_RUNS]
            problems = [AttackProblem(jobs[i].leak.packet, jobs[i].leak.snapshot, jobs[i].weights,
                                      jobs[i].start_seed, jobs[i].prior) for i in chunk]
            for i, res in zip(chunk, run_attacks(problems, env, model, optimizer, config_hash=config_hash)):
                results[i] = res
    return results


# --------------------------------------------------------------------------- scoring


def reward_level(env: EnvSpec, r: float) -> float:
    """Grid rewards take only the two range ends; snap to the nearer one."""
    if env.kind in ("gridlake", "pixelgrid"):
        return env.reward_max if abs(r - env.reward_max) < abs(r - env.reward_min) else env.reward_min
    return float(r)


def _same(env: EnvSpec, p: Transition, t: Transition) -> bool:
    if env.kind in ("gridlake", "pixelgrid"):
        return (np.array_equal(p.s, t.s) and int(p.a) == int(t.a) and np.array_equal(p.s_next, t.s_next)
                and reward_level(env, p.r) == t.r)
    parts = [np.ravel(p.s) - np.ravel(t.s), np.ravel(p.a) - np.ravel(t.a), [p.r - t.r],
             np.ravel(p.s_next) - np.ravel(t.s_next)]
    return bool(np.max(np.abs(np.concatenate(parts))) < EXACT_TOL)


def match_order(pred: Sequence[Transition], truth: Sequence[Transition]) -> list[int]:
    """Permutation of ``pred`` aligning it with ``truth`` (min total state distance).

    A batch attack recovers a set of tuples, so order is not identifiable.
    """
    if len(pred) == 1:
        return [0]
    a = np.stack([np.concatenate([np.ravel(t.s), np.ravel(t.s_next)]) for t in pred])
    b = np.stack([np.concatenate([np.ravel(t.s), np.ravel(t.s_next)]) for t in truth])
    cost = np.sum((b[:, None, :] - a[None, :, :]) ** 2, axis=-1)
    _, cols = linear_sum_assignment(cost)
    return [int(c) for c in cols]


def converged(result: ReconstructionResult, tail: float = 0.1, rtol: float = 1e-3, atol: float = 1e-9) -> bool:
    """Finite run whose objective moved by less than ``rtol`` over the last ``tail`` of iterations."""
    if not result.ok or result.iterations == 0:
        return False
    trace = result.loss_trace
    ref = trace[min(len(trace) - 1, int((1.0 - tail) * len(trace)))]
    return bool(abs(trace[-1] - ref) <= rtol * abs(ref) + atol)


def invalid_reward(env: EnvSpec, result: ReconstructionResult, tol: float = REWARD_TOL) -> bool:
    return any(t.r < env.reward_min - tol or t.r > env.reward_max + tol for t in result.decoded)


def score(env: EnvSpec, result: ReconstructionResult, truth: Sequence[Transition]) -> dict:
    """Per-run metrics against the ground truth."""
    order = match_order(result.decoded, truth)
    dec = [result.decoded[i] for i in order]
    s_pred, s_true = np.stack([t.s for t in dec]), np.stack([t.s for t in truth])
    out = {
        "GME": result.gme,
        "MSE": metrics.mse(s_pred, s_true),
        "RA": metrics.recovery_accuracy([t.a for t in dec], [t.a for t in truth]),
        "R_ERR": float(np.max([abs(p.r - t.r) for p, t in zip(dec, truth)])),
        "TE": metrics.transition_error(dec, make_env(env)),
        "exact": all(_same(env, p, t) for p, t in zip(dec, truth)),
        "invalid_r": invalid_reward(env, result),
        "converged": converged(result),
    }
    if env.kind == "pixelgrid":
        out["PSNR"] = float(np.mean([metrics.psnr(p, t) for p, t in zip(s_pred, s_true)]))
        out["SSIM"] = float(np.mean([metrics.ssim(p, t) for p, t in zip(s_pred, s_true)]))
    return out


def mean_of(scores: Sequence[dict], key: str) -> float:
    return float(np.mean([float(s[key]) for s in scores]))
