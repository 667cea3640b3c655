"""Experiment configuration: one JSON document per run."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from frlinv.attack.engine import AttackConfig
from frlinv.attack.optim import OptimizerConfig
from frlinv.attack.priors import RegWeights
from frlinv.defenses import DefenseSpec
from frlinv.envs import EnvSpec, gridlake_spec, pixelgrid_spec, pointmass_spec
from frlinv.errors import ConfigError
from frlinv.frl import FederationConfig

VARIANTS = ("GIA", "GIA-SR", "GIA-RC", "GIA-DC", "RGIA")
SENSITIVITY_AXES = ("alpha", "beta", "gamma")
LOG_GRID = [0.0, 0.01, 0.1, 1.0, 10.0]

# Required sweep axes per tag.  Tags absent here take no axes.
AXIS_SCHEMA: dict[str, tuple[str, ...]] = {
    "ablation": ("variants",),
    "sensitivity": ("values",),
    "defense": ("variances", "kinds"),
    "quantization": ("bits",),
    "batch": ("batch_sizes",),
    "multistart": ("methods",),
    "prior": ("prior_sizes",),
    "transition": ("model_sizes",),
}
TAGS = ("train", "attack") + tuple(AXIS_SCHEMA)
TREND_TAGS = tuple(AXIS_SCHEMA)

ENV_FACTORIES = {"gridlake": gridlake_spec, "pointmass": pointmass_spec, "pixelgrid": pixelgrid_spec}

# Q-network settings that train reliably on each desk environment.
DEFAULT_FEDERATION = {
    "gridlake": dict(hidden_dims=(32, 32), learning_rate=0.3),
    "pixelgrid": dict(hidden_dims=(32,), learning_rate=0.3),
    "pointmass": dict(hidden_dims=(16,), learning_rate=0.1),
}
DEFAULT_MODEL_DATA = {"gridlake": 2000, "pixelgrid": 2000, "pointmass": 500}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to replay an experiment.

    Attributes:
        tag: which pipeline to run (see ``TAGS``).
        env: environment spec.
        federation: FRL settings; ``federation.seed`` is overridden per seed.
        attack: regularizer weights, optimizer and number of starts.
        defense: defense applied to uploads (sweeps override it per arm).
        axes: sweep values keyed by axis name; required names depend on ``tag``.
        seeds: experiment seeds; each seeds data, network init and attacks.
        out_dir: where reports are written.
        data_size: offline transitions per seed, split across agents.
        model_data_size: transitions used to fit the attacker's dynamics model.
        model_epochs: training epochs of the dynamics model.
        prior_size: samples behind the state prior (``None`` keeps the 0.3% rule).
        n_packets: leaked packets attacked per seed.
        sensitivity_axis: weight swept by the ``sensitivity`` tag.
    """

    tag: str
    env: EnvSpec = field(default_factory=gridlake_spec)
    federation: FederationConfig = field(default_factory=FederationConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseSpec = field(default_factory=DefenseSpec)
    axes: dict = field(default_factory=dict)
    seeds: tuple[int, ...] = (0, 1, 2)
    out_dir: str = "out"
    data_size: int = 3000
    model_data_size: int = 2000
    model_epochs: int = 2000
    prior_size: int | None = None
    n_packets: int = 1
    sensitivity_axis: str = "beta"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "axes", {k: list(v) for k, v in self.axes.items()})
        self.validate()

    def validate(self) -> None:
        if self.tag not in TAGS:
            raise ConfigError(f"unknown experiment tag {self.tag!r}; expected one of {TAGS}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.tag in TREND_TAGS and len(self.seeds) < 3:
            raise ConfigError(f"{self.tag!r} reports a trend and needs at least 3 seeds")
        for name in AXIS_SCHEMA.get(self.tag, ()):
            if not self.axes.get(name):
                raise ConfigError(f"{self.tag!r} needs a non-empty sweep axis {name!r}")
        if self.data_size < 3 or self.model_data_size < 2 or self.model_epochs < 0:
            raise ConfigError("data sizes must be positive")
        if self.n_packets < 1:
            raise ConfigError("n_packets must be >= 1")
        if self.sensitivity_axis not in SENSITIVITY_AXES:
            raise ConfigError(f"sensitivity_axis must be one of {SENSITIVITY_AXES}")
        bad = set(self.axes.get("variants", ())) - set(VARIANTS)
        if bad:
            raise ConfigError(f"unknown variants {sorted(bad)}")
        if any(b < 1 for b in self.axes.get("batch_sizes", ())):
            raise ConfigError("batch sizes must be >= 1")

    def to_dict(self) -> dict:
        return {
            "tag": self.tag,
            "env": self.env.to_dict(),
            "federation": self.federation.to_dict(),
            "attack": self.attack.to_dict(),
            "defense": self.defense.to_dict(),
            "axes": self.axes,
            "seeds": list(self.seeds),
            "out_dir": self.out_dir,
            "data_size": self.data_size,
            "model_data_size": self.model_data_size,
            "model_epochs": self.model_epochs,
            "prior_size": self.prior_size,
            "n_packets": self.n_packets,
            "sensitivity_axis": self.sensitivity_axis,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict) or "tag" not in d:
            raise ConfigError("config must be a JSON object with a 'tag'")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            kw = dict(d)
            if "env" in kw:
                env = kw["env"]
                kw["env"] = ENV_FACTORIES[env]() if isinstance(env, str) else EnvSpec.from_dict(env)
            if "federation" in kw:
                kw["federation"] = FederationConfig.from_dict(kw["federation"])
            if "attack" in kw:
                kw["attack"] = AttackConfig.from_dict(kw["attack"])
            if "defense" in kw:
                kw["defense"] = DefenseSpec.from_dict(kw["defense"])
            return cls(**kw)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(text)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def digest(self) -> str:
        """Hash of everything that affects results (the output directory does not)."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)


def default_config(tag: str, env: str = "gridlake", **overrides) -> ExperimentConfig:
    """A runnable configuration for ``tag`` on the named environment."""
    if env not in ENV_FACTORIES:
        raise ConfigError(f"unknown environment {env!r}")
    fed = FederationConfig(n_agents=6 if tag in ("ablation", "multistart") else 3,
                           rounds=1000 if tag == "train" else 200, local_batch_size=1,
                           **DEFAULT_FEDERATION[env])
    axes = {
        "ablation": {"variants": list(VARIANTS)},
        "sensitivity": {"values": list(LOG_GRID)},
        "defense": {"variances": [1e-5, 1e-4, 1e-3, 1e-2, 1e-1], "kinds": ["gaussian", "laplace"]},
        "quantization": {"bits": [8, 4]},
        "batch": {"batch_sizes": [1, 3, 5, 8, 10]},
        "multistart": {"methods": ["GIA", "RGIA"]},
        "prior": {"prior_sizes": [5, 30, 100, 300, 1000, "all"]},
        "transition": {"model_sizes": [10, 50, 200, 1000, 2000]},
    }.get(tag, {})
    kw = dict(tag=tag, env=ENV_FACTORIES[env](), federation=fed, axes=axes,
              model_data_size=DEFAULT_MODEL_DATA[env],
              attack=AttackConfig(RegWeights(), OptimizerConfig(), k_starts=10 if tag in ("ablation", "multistart") else 1),
              n_packets=2 if tag in ("ablation", "multistart") else 1,
              seeds=tuple(range(10)) if tag in TREND_TAGS else (0,))
    kw.update(overrides)
    return ExperimentConfig(**kw)
