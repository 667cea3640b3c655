"""First-order optimizers over dictionaries of numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from frlinv.errors import ConfigError

OPTIMIZERS = ("adam", "gd")


@dataclass(frozen=True)
class OptimizerConfig:
    """Optimizer settings for attacks and model fitting.

    Attributes:
        name: ``"adam"`` or plain gradient descent ``"gd"``.
        learning_rate: step size.
        max_iterations: number of update steps.
        beta1, beta2, eps: Adam moment decay rates and denominator guard.
    """

    name: str = "adam"
    learning_rate: float = 0.05
    max_iterations: int = 3000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.name not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be >= 0")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        return cls(**d)


class Optimizer:
    """Stateful stepper; ``step`` updates ``params`` in place."""

    def __init__(self, config: OptimizerConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.config
        self.t += 1
        if c.name == "gd":
            for k, g in grads.items():
                params[k] -= c.learning_rate * g
            return
        b1, b2 = c.beta1, c.beta2
        corr1, corr2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= c.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + c.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()}, "v": {k: v.copy() for k, v in self.v.items()}}
