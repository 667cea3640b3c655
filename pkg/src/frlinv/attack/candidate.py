"""Candidate variables and their environment-specific parameterisation.

A codec turns raw optimisation variables ``{"s", "a", "r", "s_next"}`` into
the quantities the TD loss and the regularizers need:

* network features of s and s' (one-hot-like relaxations for the grid),
* an action encoding (softmax weights for discrete actions),
* numeric states in environment coordinates (for the state prior),
* the bootstrap mask ``1 - P(s' terminal)``.

Discrete dimensions are relaxed to logits of shape ``(M, C)`` and decoded by
argmax only at the end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from frlinv.envs import EnvSpec, GridLake, PixelGrid, PointMass, Transition, make_env
from frlinv.errors import ShapeError
from frlinv.numcore import autodiff as ad

VAR_NAMES = ("s", "a", "r", "s_next")


@dataclass
class Relaxed:
    """Differentiable view of a candidate batch (leading axes ``(K, B)``)."""

    s_feat: ad.Tensor
    a_enc: ad.Tensor
    r: ad.Tensor
    s_next_feat: ad.Tensor
    cont: ad.Tensor | np.ndarray
    s_num: ad.Tensor
    s_next_num: ad.Tensor


class Codec:
    """Base codec; subclasses define variable shapes and the relaxation."""

    def __init__(self, env_spec: EnvSpec):
        self.spec = env_spec
        self.env = make_env(env_spec)

    def shapes(self, batch: int) -> dict[str, tuple[int, ...]]:
        raise NotImplementedError

    def init(self, rng: np.random.Generator, batch: int) -> dict[str, np.ndarray]:
        """N(0, 1) draws in a fixed variable order."""
        return {k: rng.standard_normal(shape) for k, shape in self.shapes(batch).items()}

    def relax(self, v: dict[str, ad.Tensor]) -> Relaxed:
        raise NotImplementedError

    def decode(self, values: dict[str, np.ndarray]) -> list[Transition]:
        """Decode one run's values ``(B, ...)`` into transitions."""
        raise NotImplementedError

    def encode(self, transitions) -> dict[str, np.ndarray]:
        """Exact variables for known transitions (used to evaluate true samples)."""
        raise NotImplementedError

    def numeric(self, values: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        """Relaxed numeric ``(s, s')`` of one run, each ``(B, state_dim)``."""
        with ad.no_record():
            rel = self.relax({k: ad.Tensor(v[None]) for k, v in values.items()})
        return rel.s_num.value[0], rel.s_next_num.value[0]

    def relax_values(self, values: dict[str, np.ndarray]) -> Relaxed:
        with ad.no_record():
            return self.relax({k: ad.Tensor(np.asarray(v)) for k, v in values.items()})


def _argmax(x: np.ndarray) -> np.ndarray:
    return np.argmax(x, axis=-1)


class GridCodec(Codec):
    """Grid states as per-dimension logits ``(B, 2, side)``; actions as logits."""

    # Logit gap used when encoding known transitions: exp(-1000) underflows
    # to 0, so the softmax is exactly one-hot.
    EXACT_LOGIT = 1000.0

    def __init__(self, env_spec: EnvSpec):
        super().__init__(env_spec)
        env: GridLake = self.env
        self.side = env.side
        self.levels = np.arange(self.side) / (self.side - 1)
        self.terminal = np.zeros((self.side, self.side))
        for i, j in env.terminal_cells():
            self.terminal[i, j] = 1.0

    def shapes(self, batch):
        return {"s": (batch, 2, self.side), "a": (batch, self.spec.n_actions), "r": (batch,),
                "s_next": (batch, 2, self.side)}

    def _probs(self, logits: ad.Tensor):
        p = ad.softmax(logits, axis=-1)
        lead = p.shape[:-2]
        feat = ad.reshape(p, lead + (2 * self.side,))
        num = ad.tsum(ad.mul(p, self.levels), axis=-1)
        return p, feat, num

    def _p_terminal(self, p: ad.Tensor) -> ad.Tensor:
        lead = p.shape[:-2]
        rows = ad.reshape(p[..., 0, :], lead + (1, self.side))
        cols = ad.reshape(p[..., 1, :], lead + (1, self.side))
        mass = ad.tsum(ad.mul(ad.matmul(rows, self.terminal), cols), axis=-1)
        return ad.reshape(mass, lead)

    def relax(self, v):
        _, s_feat, s_num = self._probs(v["s"])
        p2, s2_feat, s2_num = self._probs(v["s_next"])
        cont = ad.sub(1.0, self._p_terminal(p2))
        return Relaxed(s_feat, ad.softmax(v["a"], axis=-1), v["r"], s2_feat, cont, s_num, s2_num)

    def decode(self, values):
        s_idx, s2_idx = _argmax(values["s"]), _argmax(values["s_next"])
        acts = _argmax(values["a"])
        out = []
        for b in range(acts.shape[0]):
            s2_cell = (int(s2_idx[b, 0]), int(s2_idx[b, 1]))
            out.append(Transition(self.env.state_of((int(s_idx[b, 0]), int(s_idx[b, 1]))), int(acts[b]),
                                  float(values["r"][b]), self.env.state_of(s2_cell), self.env.tile(s2_cell) in "HG"))
        return out

    def _cell_logits(self, cells) -> np.ndarray:
        x = np.zeros((len(cells), 2, self.side))
        for b, (i, j) in enumerate(cells):
            x[b, 0, i] = x[b, 1, j] = self.EXACT_LOGIT
        return x

    def encode(self, transitions):
        return {
            "s": self._cell_logits([self.env.cell(t.s) for t in transitions]),
            "a": np.eye(self.spec.n_actions)[[int(t.a) for t in transitions]] * self.EXACT_LOGIT,
            "r": np.array([t.r for t in transitions], dtype=np.float64),
            "s_next": self._cell_logits([self.env.cell(t.s_next) for t in transitions]),
        }


class PixelCodec(Codec):
    """Images as free 256-vectors; actions as logits.

    Terminal status of a continuous image is not modelled: the candidate
    always bootstraps.
    """

    def shapes(self, batch):
        d = self.spec.state_dim
        return {"s": (batch, d), "a": (batch, self.spec.n_actions), "r": (batch,), "s_next": (batch, d)}

    def relax(self, v):
        cont = np.ones(v["r"].shape)
        return Relaxed(v["s"], ad.softmax(v["a"], axis=-1), v["r"], v["s_next"], cont, v["s"], v["s_next"])

    def decode(self, values):
        acts = _argmax(values["a"])
        return [Transition(values["s"][b].copy(), int(acts[b]), float(values["r"][b]), values["s_next"][b].copy(), False)
                for b in range(acts.shape[0])]

    def encode(self, transitions):
        return {
            "s": np.stack([t.s for t in transitions]),
            "a": np.eye(self.spec.n_actions)[[int(t.a) for t in transitions]] * GridCodec.EXACT_LOGIT,
            "r": np.array([t.r for t in transitions], dtype=np.float64),
            "s_next": np.stack([t.s_next for t in transitions]),
        }


class ContinuousCodec(Codec):
    """Real-valued states and actions (point mass); never terminal."""

    def shapes(self, batch):
        d = self.spec.state_dim
        return {"s": (batch, d), "a": (batch, self.spec.action_dim), "r": (batch,), "s_next": (batch, d)}

    def relax(self, v):
        cont = np.ones(v["r"].shape)
        return Relaxed(v["s"], v["a"], v["r"], v["s_next"], cont, v["s"], v["s_next"])

    def decode(self, values):
        return [Transition(values["s"][b].copy(), values["a"][b].copy(), float(values["r"][b]),
                           values["s_next"][b].copy(), False) for b in range(values["r"].shape[0])]

    def encode(self, transitions):
        return {
            "s": np.stack([t.s for t in transitions]),
            "a": np.stack([np.asarray(t.a, float) for t in transitions]),
            "r": np.array([t.r for t in transitions], dtype=np.float64),
            "s_next": np.stack([t.s_next for t in transitions]),
        }


def make_codec(env_spec: EnvSpec) -> Codec:
    env = make_env(env_spec)
    if isinstance(env, PixelGrid):
        return PixelCodec(env_spec)
    if isinstance(env, GridLake):
        return GridCodec(env_spec)
    if isinstance(env, PointMass):
        return ContinuousCodec(env_spec)
    raise ShapeError(f"no codec for {env_spec.kind}")


@dataclass
class CandidateBatch:
    """The attacker's variables for one reconstruction of ``batch`` tuples.

    ``values`` holds raw optimisation variables (logits for discrete
    dimensions); ``optimizer_state`` holds the moment estimates when the
    batch came out of an optimisation run.
    """

    env: EnvSpec
    values: dict[str, np.ndarray]
    optimizer_state: dict = field(default_factory=dict)

    def __post_init__(self):
        codec = make_codec(self.env)
        b = np.shape(self.values["r"])[0] if np.ndim(self.values.get("r", 0)) else 0
        if b < 1:
            raise ShapeError("candidate batch needs at least one tuple")
        expected = codec.shapes(b)
        for k, shape in expected.items():
            arr = np.asarray(self.values.get(k), dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"candidate variable {k!r} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ShapeError(f"candidate variable {k!r} has non-finite entries")
            self.values[k] = arr

    @property
    def batch_size(self) -> int:
        return self.values["r"].shape[0]

    @classmethod
    def random(cls, env: EnvSpec, batch: int, seed: int) -> "CandidateBatch":
        return cls(env, make_codec(env).init(np.random.default_rng(seed), batch))

    @classmethod
    def from_transitions(cls, env: EnvSpec, transitions) -> "CandidateBatch":
        return cls(env, make_codec(env).encode(list(transitions)))

    def decode(self) -> list[Transition]:
        return make_codec(self.env).decode(self.values)

    def numeric_states(self) -> tuple[np.ndarray, np.ndarray]:
        return make_codec(self.env).numeric(self.values)
