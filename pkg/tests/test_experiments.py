from __future__ import annotations

import json
import statistics

import pytest
from click.testing import CliRunner
from hypothesis import given
from hypothesis import strategies as st

from frlinv.attack import AttackConfig, OptimizerConfig, RegWeights
from frlinv.cli import COMMANDS, main
from frlinv.errors import ConfigError
from frlinv.experiments import ExperimentConfig, default_config, run_experiment
from frlinv.experiments.config import TAGS
from frlinv.experiments.report import Report, emit_report, fmt, parse_csv, rows_to_csv, summarize
from frlinv.frl import FederationConfig

AXES = {
    "ablation": {"variants": ["GIA", "RGIA"]},
    "sensitivity": {"values": [0.0, 1.0]},
    "defense": {"variances": [1e-3, 1e-1], "kinds": ["gaussian", "laplace"]},
    "quantization": {"bits": [8, 4]},
    "batch": {"batch_sizes": [1, 2]},
    "multistart": {"methods": ["GIA", "RGIA"]},
    "prior": {"prior_sizes": [5, "all"]},
    "transition": {"model_sizes": [10, 40]},
}


def tiny(tag, env="gridlake", **kw):
    base = default_config(tag, env)
    fed = FederationConfig(**{**base.federation.to_dict(), "hidden_dims": (8,), "rounds": 2, "eval_episodes": 3})
    k = 3 if tag in ("ablation", "multistart") else 1
    attack = AttackConfig(RegWeights(), OptimizerConfig(max_iterations=15), k_starts=k)
    seeds = (0, 1, 2) if tag not in ("train", "attack") else (0,)
    args = dict(federation=fed, attack=attack, seeds=seeds, data_size=60, model_data_size=40, model_epochs=5,
                axes=AXES.get(tag, {}))
    args.update(kw)
    return base.with_(**args)


# --------------------------------------------------------------------------- config


def test_config_json_round_trip(tmp_path):
    for tag in TAGS:
        cfg = default_config(tag, "pointmass")
        back = ExperimentConfig.from_json(cfg.to_json())
        assert back.to_json() == cfg.to_json() and back.digest() == cfg.digest()
    path = tmp_path / "c.json"
    cfg.save(path)
    assert ExperimentConfig.load(path).to_json() == cfg.to_json()


def test_digest_ignores_output_directory():
    cfg = default_config("attack")
    assert cfg.with_(out_dir="elsewhere").digest() == cfg.digest()
    assert cfg.with_(data_size=100).digest() != cfg.digest()


@pytest.mark.parametrize("bad", [
    dict(tag="nope"),
    dict(tag="batch", seeds=[0, 1]),
    dict(tag="batch", axes={"batch_sizes": []}, seeds=[0, 1, 2]),
    dict(tag="batch", axes={"batch_sizes": [0]}, seeds=[0, 1, 2]),
    dict(tag="ablation", axes={"variants": ["XYZ"]}, seeds=[0, 1, 2]),
    dict(tag="attack", seeds=[]),
    dict(tag="attack", n_packets=0),
    dict(tag="attack", sensitivity_axis="delta"),
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_config_parse_errors():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"tag": "attack", "colour": "red"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"tag": "attack", "env": "atari"})
    with pytest.raises(ConfigError):
        ExperimentConfig.load("/nonexistent/config.json")
    assert ExperimentConfig.from_dict({"tag": "attack", "env": "pointmass"}).env.kind == "pointmass"


# --------------------------------------------------------------------------- report


def test_empty_report_is_header_only():
    rep = Report("attack", ("GME", "MSE"))
    assert rep.to_csv() == "experiment,arm,x,seed,GME,MSE,config_hash,version\n"


# Report cells are labels and numbers; control characters never occur in them.
printable = st.characters(blacklist_categories=("Cs", "Cc"))
values = st.one_of(st.none(), st.integers(-10**6, 10**6), st.floats(allow_nan=False, allow_infinity=False),
                   st.text(alphabet=printable, max_size=8))


@given(st.lists(st.tuples(st.text(alphabet=printable, min_size=1, max_size=5), st.integers(0, 99), values, values),
                max_size=8))
def test_csv_round_trip_is_byte_identical(rows):
    rep = Report("t", ("A", "B"), config_hash="h")
    for arm, seed, a, b in rows:
        rep.add(arm, seed, None, A=a, B=b)
    text = rep.to_csv()
    columns, parsed = parse_csv(text)
    assert rows_to_csv(columns, parsed) == text


def test_report_rejects_unknown_columns():
    with pytest.raises(KeyError):
        Report("t", ("A",)).add("arm", 0, B=1.0)


def test_fmt_conventions():
    assert fmt(None) == "" and fmt(True) == "1" and fmt(3) == "3" and fmt(0.1) == "0.1"
    assert float(fmt(1 / 3)) == 1 / 3


def test_summary_matches_oracle():
    rep = Report("t", ("A", "B"))
    data = {"x": [1.0, 2.5, 4.0, -3.0], "y": [0.1, 0.2]}
    for arm, vals in data.items():
        for i, v in enumerate(vals):
            rep.add(arm, i, None, A=v, B="n/a" if i == 0 else v * 2)
    summary = rep.summary()
    for entry in summary["arms"]:
        vals = data[entry["arm"]]
        assert entry["metrics"]["A"]["mean"] == pytest.approx(statistics.fmean(vals), rel=1e-12)
        assert entry["metrics"]["A"]["std"] == pytest.approx(statistics.pstdev(vals), rel=1e-12)
        b = [2 * v for v in vals[1:]]
        assert entry["metrics"]["B"]["mean"] == pytest.approx(statistics.fmean(b), rel=1e-12)
        assert entry["metrics"]["B"]["n"] == len(b)


def test_summary_of_missing_metric_is_null():
    out = summarize([{"arm": "a", "x": None, "M": None}], ["M"])
    assert out["arms"][0]["metrics"]["M"] == {"mean": None, "std": None, "n": 0}


# --------------------------------------------------------------------------- pipelines


@pytest.mark.parametrize("tag", TAGS)
def test_every_pipeline_runs(tag, tmp_path):
    cfg = tiny(tag, "pointmass" if tag in ("quantization", "defense") else "gridlake")
    rep = run_experiment(cfg)
    assert rep.rows and rep.tag == tag
    assert all(r["config_hash"] == cfg.digest() for r in rep.rows)
    paths = emit_report(rep, tmp_path, deterministic=True)
    names = {p.name for p in paths}
    assert {f"{tag}.csv", f"{tag}_long.csv", f"{tag}_summary.json"} <= names
    assert "wall_time" not in (tmp_path / f"{tag}.csv").read_text().splitlines()[0]


def test_pixelgrid_attack_reports_image_metrics():
    rep = run_experiment(tiny("attack", "pixelgrid"))
    assert {"PSNR", "SSIM"} <= set(rep.metrics)
    assert 0 <= rep.rows[0]["PSNR"] <= 100


def test_sensitivity_arms_and_ablation_variants():
    rep = run_experiment(tiny("sensitivity", sensitivity_axis="alpha"))
    assert rep.arms() == ["alpha=0", "alpha=1"]
    rep = run_experiment(tiny("ablation"))
    assert rep.arms() == ["GIA", "RGIA"]
    assert "consistency.csv" in rep.extras


@pytest.mark.parametrize("tag", ["attack", "multistart", "batch", "defense"])
def test_reruns_are_byte_identical(tag, tmp_path):
    cfg = tiny(tag, "pointmass")
    a = emit_report(run_experiment(cfg), tmp_path / "a", deterministic=True)
    b = emit_report(run_experiment(cfg), tmp_path / "b", deterministic=True)
    for pa, pb in zip(a, b):
        assert pa.name == pb.name and pa.read_bytes() == pb.read_bytes()


# --------------------------------------------------------------------------- CLI


def test_cli_lists_every_command():
    out = CliRunner().invoke(main, ["--help"]).output
    for name in COMMANDS:
        assert name in out
    assert "report" in out


def test_cli_runs_and_reports(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    tiny("attack").save(cfg_path)
    res = CliRunner().invoke(main, ["attack", "--config", str(cfg_path), "--out", str(tmp_path), "--deterministic"])
    assert res.exit_code == 0, res.output
    assert (tmp_path / "attack.csv").is_file() and (tmp_path / "attack_config.json").is_file()
    res = CliRunner().invoke(main, ["report", str(tmp_path / "attack.csv")])
    assert res.exit_code == 0, res.output
    summary = json.loads((tmp_path / "attack.summary.json").read_text())
    assert summary["experiment"] == "attack"
    assert (tmp_path / "attack.canonical.csv").read_text() == (tmp_path / "attack.csv").read_text()


def test_cli_seed_shifts_seed_range(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    tiny("attack").save(cfg_path)
    res = CliRunner().invoke(main, ["attack", "--config", str(cfg_path), "--seed", "4", "--out", str(tmp_path)])
    assert res.exit_code == 0, res.output
    assert json.loads((tmp_path / "attack_config.json").read_text())["seeds"] == [4]


def test_cli_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"tag": "batch", "seeds": [0]}')
    assert CliRunner().invoke(main, ["batch-sweep", "--config", str(bad)]).exit_code == 2
    good = tmp_path / "good.json"
    tiny("attack").save(good)
    assert CliRunner().invoke(main, ["train", "--config", str(good)]).exit_code == 2
    assert CliRunner().invoke(main, ["report", str(tmp_path / "missing.csv")]).exit_code == 2


def test_cli_numeric_failure_exits_3(tmp_path):
    cfg = tiny("train", "pointmass")
    fed = FederationConfig(**{**cfg.federation.to_dict(), "learning_rate": 1e300, "rounds": 4})
    path = tmp_path / "diverge.json"
    cfg.with_(federation=fed).save(path)
    with pytest.warns(RuntimeWarning):
        res = CliRunner().invoke(main, ["train", "--config", str(path), "--out", str(tmp_path)])
    assert res.exit_code == 3, res.output
