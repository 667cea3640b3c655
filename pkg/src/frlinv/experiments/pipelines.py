"""Named experiment pipelines.  Each takes an ``ExperimentConfig`` and returns a ``Report``.

Within a pipeline every (arm, seed, packet, start) attack is an independent
task; they are stacked and optimised together by the vectorised engine,
and rows are assembled afterwards in config order.
"""

from __future__ import annotations

import csv
import io
from dataclasses import replace
from typing import Callable

import numpy as np

from frlinv.attack.engine import gradient_matching_error
from frlinv.attack.multistart import consistency_csv, consistency_embedding, packet_id, pca_project, \
    summarize_consistency
from frlinv.attack.priors import RegWeights
from frlinv.defenses import DefenseSpec, quantize
from frlinv.errors import ConfigError
from frlinv.experiments.config import SENSITIVITY_AXES, ExperimentConfig
from frlinv.experiments.report import Report, fmt
from frlinv.experiments.world import Job, Leak, build_model, build_prior, build_world, federation_for, \
    leak_packets, mean_of, run_jobs, score
from frlinv.frl import run_federation

ATTACK_METRICS = ("GME", "MSE", "RA", "R_ERR", "TE", "exact", "invalid_r", "converged")
CONSISTENCY_METRICS = ("ED", "SS", "CD", "TE", "RA", "MSE", "GME", "exact", "invalid_ratio", "n_invalid",
                       "n_converged", "n_runs")


def start_seed(seed: int, k: int) -> int:
    """Attack start seeds; shared by every arm and packet of an experiment seed."""
    return 1000 * seed + k


def variant_weights(name: str, base: RegWeights) -> RegWeights:
    """Weights of an ablation variant: one regularizer at a time, all, or none."""
    a, b, g = base.alpha, base.beta, base.gamma
    table = {"GIA": (0.0, 0.0, 0.0), "GIA-SR": (a, 0.0, 0.0), "GIA-RC": (0.0, b, 0.0),
             "GIA-DC": (0.0, 0.0, g), "RGIA": (a, b, g)}
    if name not in table:
        raise ConfigError(f"unknown variant {name!r}")
    if name == "GIA":
        return RegWeights.gia()
    return RegWeights(*table[name], lam=base.lam)


def _defense(cfg: ExperimentConfig) -> DefenseSpec | None:
    return None if cfg.defense.kind == "none" else cfg.defense


def _pixel_extra(cfg: ExperimentConfig) -> tuple[str, ...]:
    return ("PSNR", "SSIM") if cfg.env.kind == "pixelgrid" else ()


# --------------------------------------------------------------------------- multi-start family


def _consistency_report(cfg: ExperimentConfig, tag: str, arms: list[tuple[str, object, RegWeights]],
                        pca: bool = False) -> Report:
    """Run ``k_starts`` attacks per leaked packet for each arm and seed.

    Rows report ED/SS/CD over the starts (SS labels = packet identity),
    plus TE, RA, MSE and GME averaged over all runs, and the count of
    converged runs whose reward left the admissible range.
    """
    k = cfg.attack.k_starts
    report = Report(tag, CONSISTENCY_METRICS, config_hash=cfg.digest())
    jobs, blocks = [], []
    model = build_model(cfg)
    for seed in cfg.seeds:
        world = build_world(cfg, seed)
        leaks = leak_packets(world, federation_for(cfg, seed), cfg.n_packets, _defense(cfg), distinct=True)
        for label, x, w in arms:
            lo = len(jobs)
            jobs += [Job(leak, w, start_seed(seed, j), world.prior) for leak in leaks for j in range(k)]
            blocks.append((label, x, seed, leaks, lo, len(jobs)))
    results = run_jobs(jobs, cfg.env, cfg.attack.optimizer, cfg.attack.digest(), default_model=model)
    consistency, pca_rows = [], []
    for label, x, seed, leaks, lo, hi in blocks:
        res = results[lo:hi]
        scores = [score(cfg.env, r, jobs[lo + i].leak.truth) for i, r in enumerate(res)]
        ed = ss = cd = float("nan")
        if k >= 2:
            rep = summarize_consistency(label, [lk.packet for lk in leaks], res, k, cfg.env)
            ed, ss, cd = rep.ed, rep.ss, rep.cd
            consistency.append(rep)
            if pca:
                pca_rows += _pca_rows(label, seed, leaks, res, k)
        conv = [s["converged"] for s in scores]
        n_invalid = sum(bool(s["invalid_r"]) for s in scores if s["converged"])
        report.add(label, seed, x, ED=ed, SS=ss, CD=cd, TE=mean_of(scores, "TE"), RA=mean_of(scores, "RA"),
                   MSE=mean_of(scores, "MSE"), GME=mean_of(scores, "GME"), exact=mean_of(scores, "exact"),
                   invalid_ratio=n_invalid / sum(conv) if any(conv) else float("nan"),
                   n_invalid=n_invalid, n_converged=sum(conv), n_runs=len(res))
    if consistency:
        report.extras["consistency.csv"] = consistency_csv(consistency)
    if pca:
        report.extras["pca.csv"] = _rows_csv(("method", "seed", "packet_id", "start", "pc1", "pc2"), pca_rows)
    return report


def _pca_rows(label, seed, leaks: list[Leak], res, k) -> list[list]:
    emb = np.stack([consistency_embedding(r) for r in res])
    if emb.shape[0] < 3:
        return []
    proj = pca_project(emb, dims=min(2, emb.shape[1])).points
    rows = []
    for i, p in enumerate(proj):
        pc = list(p) + [0.0] * (2 - len(p))
        rows.append([label, seed, packet_id(leaks[i // k].packet), i % k, pc[0], pc[1]])
    return rows


def _rows_csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows([[fmt(v) for v in row] for row in rows])
    return buf.getvalue()


def run_ablation(cfg: ExperimentConfig) -> Report:
    """GIA, single-regularizer variants and RGIA side by side."""
    arms = [(v, None, variant_weights(v, cfg.attack.weights)) for v in cfg.axes["variants"]]
    return _consistency_report(cfg, "ablation", arms)


def run_multistart(cfg: ExperimentConfig) -> Report:
    """Multi-start dispersion of RGIA versus GIA (plus a PCA export)."""
    arms = [(m, None, variant_weights(m, cfg.attack.weights)) for m in cfg.axes["methods"]]
    return _consistency_report(cfg, "multistart", arms, pca=True)


def run_sensitivity(cfg: ExperimentConfig, axis: str | None = None, grid=None) -> Report:
    """Sweep one regularizer weight over ``grid`` with the others at their configured values."""
    axis = axis or cfg.sensitivity_axis
    grid = list(grid if grid is not None else cfg.axes.get("values", []))
    if axis not in SENSITIVITY_AXES:
        raise ConfigError(f"axis must be one of {SENSITIVITY_AXES}")
    if not grid:
        raise ConfigError("sensitivity grid is empty")
    arms = [(f"{axis}={v:g}", float(v), replace(cfg.attack.weights, **{axis: float(v)})) for v in grid]
    return _consistency_report(cfg, "sensitivity", arms)


# --------------------------------------------------------------------------- single-start attacks


def _attack_report(cfg: ExperimentConfig, tag: str, arms: list[tuple[str, object, Callable]], extra=(),
                   timing: bool = False) -> tuple[Report, list]:
    """Score one attack per (arm, seed, packet, start).

    Each arm is ``(label, x, make_jobs)`` where ``make_jobs(world, seed)``
    returns ``[(job, clean_packet_or_None), ...]``.
    """
    cols = ATTACK_METRICS + _pixel_extra(cfg) + tuple(extra) + (("wall_time",) if timing else ())
    report = Report(tag, cols, config_hash=cfg.digest())
    model = build_model(cfg)
    worlds = {seed: build_world(cfg, seed) for seed in cfg.seeds}
    jobs, labels = [], []
    for label, x, make in arms:
        for seed in cfg.seeds:
            for job, clean in make(worlds[seed], seed):
                jobs.append(job)
                labels.append((label, x, seed, clean))
    results = run_jobs(jobs, cfg.env, cfg.attack.optimizer, cfg.attack.digest(), default_model=model)
    for job, (label, x, seed, clean), res in zip(jobs, labels, results):
        row = score(cfg.env, res, job.leak.truth)
        if "GME_clean" in cols:
            row["GME_clean"] = gradient_matching_error(res.candidate, clean, job.leak.snapshot)
        if timing:
            row["wall_time"] = res.wall_time
        report.add(label, seed, x, **{c: row[c] for c in cols if c in row})
    return report, results


def _starts(cfg: ExperimentConfig, leaks, weights, prior, seed, model=None):
    return [(Job(leak, weights, start_seed(seed, j), prior, model), None)
            for leak in leaks for j in range(cfg.attack.k_starts)]


def run_attack(cfg: ExperimentConfig) -> Report:
    """Attack ``n_packets`` round-0 uploads per seed with the configured weights."""
    w = cfg.attack.weights
    label = "GIA" if w == RegWeights.gia() else "RGIA" if w == RegWeights(lam=w.lam) else "custom"

    def make(world, seed):
        leaks = leak_packets(world, federation_for(cfg, seed), cfg.n_packets, _defense(cfg))
        return _starts(cfg, leaks, w, world.prior, seed)

    report, results = _attack_report(cfg, "attack", [(label, None, make)], timing=True)
    report.results = results
    return report


def run_quantization(cfg: ExperimentConfig) -> Report:
    """Attack the same uploads after 8- and 4-bit quantization.

    ``GME`` is measured against the quantized packet the attacker sees,
    ``GME_clean`` against the unquantized gradient.
    """
    arms = []
    for bits in cfg.axes["bits"]:
        def make(world, seed, bits=bits):
            leaks = leak_packets(world, federation_for(cfg, seed), cfg.n_packets)
            out = []
            for leak in leaks:
                q = Leak(quantize(leak.packet, int(bits)), leak.snapshot, leak.truth)
                out += [(job, leak.packet) for job, _ in _starts(cfg, [q], cfg.attack.weights, world.prior, seed)]
            return out
        arms.append((f"quantize:{bits}", int(bits), make))
    return _attack_report(cfg, "quantization", arms, extra=("GME_clean",))[0]


def run_batch_sweep(cfg: ExperimentConfig) -> Report:
    """Attack uploads computed on mini-batches of each size; wall time is per run."""
    sizes = cfg.axes.get("batch_sizes", [])
    if not sizes:
        raise ConfigError("batch list is empty")
    arms = []
    for b in sizes:
        def make(world, seed, b=b):
            leaks = leak_packets(world, federation_for(cfg, seed, batch=int(b)), cfg.n_packets, _defense(cfg))
            return _starts(cfg, leaks, cfg.attack.weights, world.prior, seed)
        arms.append((f"batch={b}", int(b), make))
    return _attack_report(cfg, "batch", arms, timing=True)[0]


def run_prior_bias(cfg: ExperimentConfig) -> Report:
    """State priors estimated from subsets of each size, plus a no-prior arm (alpha = 0)."""
    arms = []
    for size in cfg.axes["prior_sizes"]:
        def make(world, seed, size=size):
            prior = build_prior(cfg, world.dataset, seed, size)
            leaks = leak_packets(world, federation_for(cfg, seed), cfg.n_packets, _defense(cfg))
            return _starts(cfg, leaks, cfg.attack.weights, prior, seed)
        n = cfg.data_size if size == "all" else int(size)
        arms.append((f"prior={size}", n, make))

    def no_prior(world, seed):
        leaks = leak_packets(world, federation_for(cfg, seed), cfg.n_packets, _defense(cfg))
        return _starts(cfg, leaks, replace(cfg.attack.weights, alpha=0.0), None, seed)

    arms.append(("no-prior", 0, no_prior))
    return _attack_report(cfg, "prior", arms)[0]


def run_transition_study(cfg: ExperimentConfig) -> Report:
    """Dynamics models fitted on increasing amounts of attacker data."""
    arms = []
    for size in cfg.axes["model_sizes"]:
        model = build_model(cfg, int(size))

        def make(world, seed, model=model):
            leaks = leak_packets(world, federation_for(cfg, seed), cfg.n_packets, _defense(cfg))
            return _starts(cfg, leaks, cfg.attack.weights, world.prior, seed, model)
        arms.append((f"model={size}", int(size), make))
    report, _ = _attack_report(cfg, "transition", arms, extra=("val_mse",))
    for row in report.rows:
        row["val_mse"] = build_model(cfg, int(row["x"])).val_mse
    return report


# --------------------------------------------------------------------------- federation-level


def run_train(cfg: ExperimentConfig) -> Report:
    """Federated training only: final TD loss and greedy return per seed."""
    report = Report("train", ("TD_LOSS", "RETURN"), config_hash=cfg.digest())
    for seed in cfg.seeds:
        world = build_world(cfg, seed)
        fed = federation_for(cfg, seed, eval_every=max(cfg.federation.eval_every, cfg.federation.rounds))
        result = run_federation(fed, world.shards, defense=_defense(cfg))
        report.add(cfg.defense.label, seed, None, TD_LOSS=result.final_td_loss(), RETURN=result.final_eval_return())
        report.extras[f"log_seed{seed}.csv"] = result.log_csv()
    return report


def run_defense_sweep(cfg: ExperimentConfig) -> Report:
    """Noise defenses at each variance: training outcome and attack quality.

    Leaked packets are the round-0 uploads after the defense, i.e. exactly
    what the server receives in the first round of the same federation.
    The noise stream depends only on (seed, round, agent), so arms differ
    only in the noise scale.
    """
    report = Report("defense", ("TD_LOSS", "RETURN", "MSE", "RA", "GME"), config_hash=cfg.digest())
    model = build_model(cfg)
    worlds = {seed: build_world(cfg, seed) for seed in cfg.seeds}
    arms = []
    for kind in cfg.axes["kinds"]:
        for var in ([0.0] if kind == "none" else cfg.axes["variances"]):
            arms.append((kind, float(var)))
    jobs, meta = [], []
    for kind, var in arms:
        for seed in cfg.seeds:
            world = worlds[seed]
            spec = DefenseSpec(kind, var, seed=seed) if kind != "none" else None
            fed = federation_for(cfg, seed, eval_every=max(cfg.federation.eval_every, cfg.federation.rounds))
            fl = run_federation(fed, world.shards, defense=spec)
            leaks = leak_packets(world, fed, cfg.n_packets, spec)
            lo = len(jobs)
            jobs += [job for job, _ in _starts(cfg, leaks, cfg.attack.weights, world.prior, seed)]
            meta.append((kind, var, seed, fl, lo, len(jobs)))
    results = run_jobs(jobs, cfg.env, cfg.attack.optimizer, cfg.attack.digest(), default_model=model)
    for kind, var, seed, fl, lo, hi in meta:
        scores = [score(cfg.env, results[i], jobs[i].leak.truth) for i in range(lo, hi)]
        report.add(kind, seed, var, TD_LOSS=fl.final_td_loss(), RETURN=fl.final_eval_return(),
                   MSE=mean_of(scores, "MSE"), RA=mean_of(scores, "RA"), GME=mean_of(scores, "GME"))
    return report


PIPELINES: dict[str, Callable[[ExperimentConfig], Report]] = {
    "train": run_train,
    "attack": run_attack,
    "ablation": run_ablation,
    "sensitivity": run_sensitivity,
    "defense": run_defense_sweep,
    "quantization": run_quantization,
    "batch": run_batch_sweep,
    "multistart": run_multistart,
    "prior": run_prior_bias,
    "transition": run_transition_study,
}


def run_experiment(cfg: ExperimentConfig) -> Report:
    return PIPELINES[cfg.tag](cfg)
