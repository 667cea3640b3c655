"""Report assembly and serialisation (CSV, long CSV, JSON summary)."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from frlinv import __version__

ID_COLUMNS = ("experiment", "arm", "x", "seed")
TRAILER_COLUMNS = ("config_hash", "version")
TIMING_COLUMNS = ("wall_time",)


def fmt(value) -> str:
    """Canonical text for a cell; floats use ``repr`` so they round-trip exactly."""
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _num(text: str) -> float | None:
    try:
        return float(text)
    except (TypeError, ValueError):
        return None


@dataclass
class Report:
    """Rows of one experiment with a fixed column order.

    ``metrics`` are the measured columns; identity columns and the
    ``config_hash``/``version`` trailer are added around them.  ``extras``
    maps a file suffix to additional CSV text (e.g. the consistency table);
    ``results`` optionally holds ``ReconstructionResult`` objects written
    one JSON document per line.
    """

    tag: str
    metrics: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)
    config_hash: str = ""
    extras: dict[str, str] = field(default_factory=dict)
    results: list = field(default_factory=list)

    def add(self, arm: str, seed: int, x=None, **values) -> dict:
        unknown = set(values) - set(self.metrics)
        if unknown:
            raise KeyError(f"unknown report columns {sorted(unknown)}")
        row = {"experiment": self.tag, "arm": arm, "x": x, "seed": seed, **values,
               "config_hash": self.config_hash, "version": __version__}
        self.rows.append(row)
        return row

    def columns(self, deterministic: bool = False) -> tuple[str, ...]:
        metrics = tuple(m for m in self.metrics if not (deterministic and m in TIMING_COLUMNS))
        return ID_COLUMNS + metrics + TRAILER_COLUMNS

    def column(self, name: str, arm: str | None = None) -> list:
        return [r.get(name) for r in self.rows if arm is None or r["arm"] == arm]

    def arms(self) -> list[str]:
        return list(dict.fromkeys(r["arm"] for r in self.rows))

    def to_csv(self, deterministic: bool = False) -> str:
        return rows_to_csv(self.columns(deterministic), self.rows)

    def to_long_csv(self, deterministic: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ID_COLUMNS + ("metric", "value"))
        metrics = [m for m in self.metrics if not (deterministic and m in TIMING_COLUMNS)]
        for r in self.rows:
            for m in metrics:
                w.writerow([fmt(r.get(c)) for c in ID_COLUMNS] + [m, fmt(r.get(m))])
        return buf.getvalue()

    def summary(self, deterministic: bool = False) -> dict:
        return summarize(self.rows, [m for m in self.metrics if not (deterministic and m in TIMING_COLUMNS)],
                         tag=self.tag, config_hash=self.config_hash)


def rows_to_csv(columns: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def parse_csv(text: str) -> tuple[list[str], list[dict]]:
    """Inverse of ``rows_to_csv``; cells stay as strings."""
    reader = csv.reader(io.StringIO(text))
    try:
        columns = next(reader)
    except StopIteration:
        return [], []
    return columns, [dict(zip(columns, row)) for row in reader]


def summarize(rows: Sequence[dict], metrics: Sequence[str], tag: str = "", config_hash: str = "") -> dict:
    """Mean and population standard deviation of each metric per (arm, x).

    Non-numeric or missing cells are skipped; a metric with no numeric
    cells (or a NaN mean) is reported as ``null``.
    """
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in rows:
        groups.setdefault((fmt(r.get("arm")), fmt(r.get("x"))), []).append(r)
    arms = []
    for (arm, x), members in groups.items():
        entry = {"arm": arm, "x": x, "n": len(members), "metrics": {}}
        for m in metrics:
            vals = [v for v in (_num(fmt(r.get(m))) for r in members) if v is not None]
            if not vals:
                entry["metrics"][m] = {"mean": None, "std": None, "n": 0}
                continue
            mean, std = float(np.mean(vals)), float(np.std(vals))
            entry["metrics"][m] = {"mean": None if math.isnan(mean) else mean,
                                   "std": None if math.isnan(std) else std, "n": len(vals)}
        arms.append(entry)
    return {"experiment": tag, "config_hash": config_hash, "version": __version__, "arms": arms}


def emit_report(report: Report, out_dir, deterministic: bool = False) -> list[Path]:
    """Write ``<tag>.csv``, ``<tag>_long.csv``, ``<tag>_summary.json`` and any extras.

    Rows are written in insertion order, which every pipeline fixes by
    iterating arms and seeds in config order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        f"{report.tag}.csv": report.to_csv(deterministic),
        f"{report.tag}_long.csv": report.to_long_csv(deterministic),
        f"{report.tag}_summary.json": json.dumps(report.summary(deterministic), indent=2, sort_keys=True) + "\n",
    }
    for suffix, text in sorted(report.extras.items()):
        files[f"{report.tag}_{suffix}"] = text
    if report.results:
        files[f"{report.tag}_results.jsonl"] = "".join(
            r.to_json(include_timing=not deterministic) + "\n" for r in report.results)
    paths = []
    for name, text in files.items():
        path = out / name
        path.write_text(text)
        paths.append(path)
    return paths
