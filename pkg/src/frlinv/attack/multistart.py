"""Multi-start consistency analysis and PCA export of reconstructions."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from frlinv import metrics
from frlinv.attack.candidate import make_codec
from frlinv.attack.engine import AttackConfig, AttackProblem, ReconstructionResult, run_attacks
from frlinv.attack.priors import StatePrior, TransitionModel
from frlinv.envs import EnvSpec
from frlinv.frl import GradientPacket, NetSnapshot

CONSISTENCY_COLUMNS = ("method", "packet_id", "ED", "SS", "CD")


def consistency_embedding(result: ReconstructionResult) -> np.ndarray:
    """Point used for dispersion metrics: the relaxed next state(s), flattened.

    The current state is pinned by the first-layer gradient under every
    attack variant, so the spread between starts lives in the next state
    (and the reward traded against it).
    """
    _, s_next = result.candidate.numeric_states()
    return s_next.ravel()


@dataclass
class PacketConsistency:
    packet_id: str
    ed: float
    cd: float
    results: list[ReconstructionResult]


@dataclass
class ConsistencyReport:
    method: str
    packets: list[PacketConsistency]
    ss: float
    ss_degenerate: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def ed(self) -> float:
        return float(np.mean([p.ed for p in self.packets]))

    @property
    def cd(self) -> float:
        return float(np.mean([p.cd for p in self.packets]))

    def rows(self) -> list[list]:
        return [[self.method, p.packet_id, repr(p.ed), repr(self.ss), repr(p.cd)] for p in self.packets]

    def to_csv(self) -> str:
        return consistency_csv([self])


def consistency_csv(reports: Sequence[ConsistencyReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CONSISTENCY_COLUMNS)
    for rep in reports:
        w.writerows(rep.rows())
    return buf.getvalue()


def packet_id(packet: GradientPacket) -> str:
    return f"r{packet.round}a{packet.agent_id}-{packet.digest()[:8]}"


def multistart_analysis(
    packets: Sequence[GradientPacket] | GradientPacket,
    snapshots: Sequence[NetSnapshot] | NetSnapshot,
    k_starts: int,
    attack_config: AttackConfig,
    env: EnvSpec,
    prior: StatePrior | None = None,
    model: TransitionModel | None = None,
    seed: int = 0,
    method: str = "",
    seeds: Sequence[int] | None = None,
) -> ConsistencyReport:
    """Reconstruct each packet from ``k_starts`` random starts.

    ED and CD are computed per packet over its ``k`` reconstructions; the
    silhouette uses packet identity as the cluster label and therefore
    needs at least two packets (it is NaN otherwise).  ``seeds`` overrides
    the default start seeds ``seed, seed + 1, ...``.
    """
    if isinstance(packets, GradientPacket):
        packets, snapshots = [packets], [snapshots]
    if k_starts < 2:
        raise ValueError("multi-start analysis needs k >= 2")
    if len(packets) != len(snapshots) or not packets:
        raise ValueError("one snapshot per packet is required")
    start_seeds = list(seeds) if seeds is not None else [seed + i for i in range(k_starts)]
    if len(start_seeds) != k_starts:
        raise ValueError("seeds must have k_starts entries")
    problems = multistart_problems(packets, snapshots, attack_config, start_seeds, prior)
    results = run_attacks(problems, env, model, attack_config.optimizer, config_hash=attack_config.digest())
    name = method or ("GIA" if not any(attack_config.weights.as_array()[:3]) else "RGIA")
    return summarize_consistency(name, packets, results, k_starts, env)


def multistart_problems(packets, snapshots, attack_config: AttackConfig, start_seeds, prior) -> list[AttackProblem]:
    """Problems in packet-major order: all starts of packet 0, then packet 1, ..."""
    return [AttackProblem(p, snap, attack_config.weights, s, prior)
            for p, snap in zip(packets, snapshots) for s in start_seeds]


def summarize_consistency(method: str, packets, results: Sequence[ReconstructionResult], k_starts: int,
                          env: EnvSpec) -> ConsistencyReport:
    """Dispersion metrics for packet-major ``results`` (``k_starts`` per packet)."""
    per_packet, points, labels = [], [], []
    for j, p in enumerate(packets):
        res = list(results[j * k_starts:(j + 1) * k_starts])
        emb = np.stack([consistency_embedding(r) for r in res])
        per_packet.append(PacketConsistency(packet_id(p), metrics.pairwise_euclidean(emb),
                                            metrics.covariance_determinant(emb), res))
        points.append(emb)
        labels += [j] * k_starts
    ss, degenerate = float("nan"), False
    if len(packets) >= 2:
        ss, degenerate = metrics.silhouette(np.concatenate(points), labels, return_flag=True)
    return ConsistencyReport(method, per_packet, ss, degenerate, {"k_starts": k_starts, "env": env.kind})


# --------------------------------------------------------------------------- PCA


@dataclass
class PcaResult:
    points: np.ndarray
    explained_variance: np.ndarray
    explained_ratio: np.ndarray
    components: np.ndarray
    mean: np.ndarray
    degenerate: bool = False

    def reconstruct(self) -> np.ndarray:
        return self.points @ self.components + self.mean


def pca_project(states, dims: int = 2) -> PcaResult:
    """Project onto the top ``dims`` principal components.

    Components are ordered by decreasing eigenvalue and signed so that
    their first non-zero loading is positive.  If every point coincides
    the projection is all zeros and the result is flagged degenerate.
    """
    x = np.asarray(states, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("PCA needs at least three state vectors")
    if not 1 <= dims <= x.shape[1]:
        raise ValueError(f"dims must be in [1, {x.shape[1]}]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:dims]
    evals = np.clip(evals[order], 0.0, None)
    comps = evecs[:, order].T
    for c in comps:
        nz = np.flatnonzero(np.abs(c) > 1e-12)
        if nz.size and c[nz[0]] < 0:
            c *= -1.0
    total = float(np.clip(np.linalg.eigvalsh(cov), 0.0, None).sum())
    if total <= 0.0:
        z = np.zeros(dims)
        return PcaResult(np.zeros((x.shape[0], dims)), z, z.copy(), comps, mean, degenerate=True)
    return PcaResult(xc @ comps.T, evals, evals / total, comps, mean)


def reconstructed_states(results: Sequence[ReconstructionResult]) -> np.ndarray:
    """Relaxed current states of a list of results (one row per tuple)."""
    rows = []
    for r in results:
        s, _ = make_codec(r.candidate.env).numeric(r.candidate.values)
        rows.extend(s)
    return np.array(rows)
