"""Reconstruction-quality and consistency metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from frlinv.errors import ShapeError

PSNR_CAP = 100.0
CONTINUOUS_ACTION_TOL = 0.05


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"shapes differ: {x.shape} vs {y.shape}")
    if x.size == 0:
        raise ShapeError("empty input")
    return x, y


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def actions_match(pred, true, tol: float = CONTINUOUS_ACTION_TOL) -> bool:
    """Discrete actions must be equal; continuous ones within ``tol`` in max-norm."""
    if np.ndim(true) == 0:
        return int(pred) == int(true)
    return bool(np.max(np.abs(np.asarray(pred, float) - np.asarray(true, float))) < tol)


def recovery_accuracy(pred_actions: Sequence, true_actions: Sequence, tol: float = CONTINUOUS_ACTION_TOL) -> float:
    """Fraction of reconstructed actions matching the truth."""
    if len(pred_actions) != len(true_actions):
        raise ShapeError("prediction and truth lengths differ")
    if len(true_actions) == 0:
        raise ValueError("no actions to compare")
    return sum(actions_match(p, t, tol) for p, t in zip(pred_actions, true_actions)) / len(true_actions)


def psnr(img_a, img_b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB for (near-)identical images."""
    err = mse(img_a, img_b)
    if err < 1e-10:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(max_val ** 2 / err)))


def _as_image(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        side = int(round(np.sqrt(x.size)))
        if side * side != x.size:
            raise ShapeError("flat image length is not a perfect square")
        x = x.reshape(side, side)
    if x.ndim != 2:
        raise ShapeError("images must be 2-D (or flat squares)")
    return x


def ssim(img_a, img_b, window: int = 8, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over all ``window x window`` patches (stride 1).

    Local statistics use a uniform window with population (1/N) moments.
    """
    a, b = _as_image(img_a), _as_image(img_b)
    if a.shape != b.shape:
        raise ShapeError("images differ in shape")
    if min(a.shape) < window:
        raise ShapeError(f"image {a.shape} smaller than the {window}x{window} window")
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    pa = sliding_window_view(a, (window, window))
    pb = sliding_window_view(b, (window, window))
    mu_a, mu_b = pa.mean(axis=(-1, -2)), pb.mean(axis=(-1, -2))
    var_a = (pa ** 2).mean(axis=(-1, -2)) - mu_a ** 2
    var_b = (pb ** 2).mean(axis=(-1, -2)) - mu_b ** 2
    cov = (pa * pb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _points(states) -> np.ndarray:
    x = np.asarray(states, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ShapeError("states must be a list of vectors")
    return x


def _distances(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.sum(diff ** 2, axis=-1))


def pairwise_euclidean(states) -> float:
    """Mean distance over all unordered pairs."""
    x = _points(states)
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two states")
    iu = np.triu_indices(n, k=1)
    return float(np.mean(_distances(x)[iu]))


def silhouette(states, labels, return_flag: bool = False):
    """Mean silhouette coefficient; singletons score 0.

    When every point coincides the coefficient is 0/0; it is reported as
    0 and, with ``return_flag``, flagged as degenerate.
    """
    x = _points(states)
    labels = np.asarray(labels)
    if labels.shape != (x.shape[0],):
        raise ShapeError("one label per state is required")
    if x.shape[0] < 3:
        raise ValueError("need at least three states")
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValueError("silhouette needs at least two clusters")
    d = _distances(x)
    scores = np.zeros(x.shape[0])
    degenerate = not np.any(d > 0)
    for i in range(x.shape[0]):
        same = labels == labels[i]
        if same.sum() == 1:
            continue
        a = d[i, same].sum() / (same.sum() - 1)
        b = min(d[i, labels == lab].mean() for lab in uniq if lab != labels[i])
        m = max(a, b)
        scores[i] = 0.0 if m == 0 else (b - a) / m
    value = float(np.mean(scores))
    return (value, degenerate) if return_flag else value


def covariance_determinant(states) -> float:
    """Determinant of the sample covariance (divisor n - 1), clamped at 0."""
    x = _points(states)
    if x.shape[0] < 2:
        raise ValueError("need at least two states")
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    det = float(np.linalg.det(cov))
    if det < 0:
        # LU roundoff scales with the largest variance to the power d.
        d = cov.shape[0]
        tol = 100 * d * np.finfo(float).eps * float(np.max(np.diag(cov))) ** d
        if det < -max(tol, 1e-300):
            raise ArithmeticError(f"covariance determinant is negative ({det})")
        det = 0.0
    return det


def transition_error(samples, dynamics) -> float:
    """Mean over samples of ``||f(s, a) - s'||^2 / dim``.

    ``dynamics`` is an environment (true ``true_next``) or a learned
    ``TransitionModel`` (compared in its feature space).
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no samples")
    total = 0.0
    for t in samples:
        if hasattr(dynamics, "true_next"):
            pred, target = dynamics.true_next(t.s, t.a), np.asarray(t.s_next, float)
        else:
            pred = dynamics.predict(np.asarray(t.s, float)[None], [t.a])[0]
            target = dynamics.encode_states(np.asarray(t.s_next, float)[None])[0]
        if pred.shape != target.shape:
            raise ShapeError("dynamics output does not match s_next")
        total += float(np.sum((pred - target) ** 2)) / target.size
    return total / len(samples)


def transition_error_source(dynamics) -> str:
    return "env" if hasattr(dynamics, "true_next") else "model"


def gme(packet, candidate, net_snapshot) -> float:
    """Gradient matching error of a candidate batch against a packet."""
    from frlinv.attack.engine import gradient_matching_error

    return gradient_matching_error(candidate, packet, net_snapshot)


# --------------------------------------------------------------------------- report

METRIC_NAMES = ("MSE", "RA", "PSNR", "SSIM", "ED", "SS", "CD", "TE", "GME")
REPORT_COLUMNS = ("method", "env", "seed", "n", "m") + METRIC_NAMES
_RANGES = {"RA": (0.0, 1.0), "SS": (-1.0, 1.0), "SSIM": (-1.0, 1.0), "PSNR": (0.0, PSNR_CAP)}


@dataclass
class MetricsReport:
    values: dict[str, float]
    n: int = 0
    m: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, v in self.values.items():
            if name not in METRIC_NAMES:
                raise ValueError(f"unknown metric {name!r}")
            lo, hi = _RANGES.get(name, (0.0, np.inf))
            if not (lo - 1e-12 <= v <= hi + 1e-12):
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")

    def row(self) -> list[str]:
        out = [str(self.meta.get("method", "")), str(self.meta.get("env", "")), str(self.meta.get("seed", "")),
               str(self.n), str(self.m)]
        out += [repr(float(self.values[k])) if k in self.values else "" for k in METRIC_NAMES]
        return out

    @staticmethod
    def to_csv(reports: Sequence["MetricsReport"]) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow(r.row())
        return buf.getvalue()
