"""Desk-scale environments: a frozen-lake grid, a linear point mass, and the
grid rendered to 16x16 images.

Environments are plain values advanced with an explicit ``numpy`` Generator,
so concurrent episodes only need separate instances and RNG streams.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence, Union

import numpy as np

from frlinv.errors import ConfigError, ShapeError

Action = Union[int, np.ndarray]

# FrozenLake action convention.
LEFT, DOWN, RIGHT, UP = 0, 1, 2, 3
_MOVES = {LEFT: (0, -1), DOWN: (1, 0), RIGHT: (0, 1), UP: (-1, 0)}

DEFAULT_LAKE = ("SFFF", "FHFH", "FFFH", "HFFG")
IMAGE_SIDE = 16


@dataclass(frozen=True)
class EnvSpec:
    """Static description of an environment.

    ``n_actions`` is set for discrete action spaces; ``action_low`` and
    ``action_high`` for continuous boxes.  ``options`` holds kind-specific
    settings (lake map and slip, linear dynamics matrices, horizon).
    """

    kind: str
    state_dim: int
    reward_min: float
    reward_max: float
    discount: float
    n_actions: int | None = None
    action_low: tuple[float, ...] | None = None
    action_high: tuple[float, ...] | None = None
    options: dict = field(default_factory=dict, hash=False, compare=True)

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise ConfigError(f"unknown environment kind {self.kind!r}")
        if not self.reward_min <= self.reward_max:
            raise ConfigError("reward_min must not exceed reward_max")
        if not 0.0 < self.discount < 1.0:
            raise ConfigError("discount must lie in (0, 1)")
        if self.n_actions is not None:
            if self.n_actions < 2:
                raise ConfigError("discrete action spaces need at least 2 actions")
        else:
            if self.action_low is None or self.action_high is None:
                raise ConfigError("continuous action spaces need bounds")
            lo, hi = np.asarray(self.action_low, float), np.asarray(self.action_high, float)
            if lo.shape != hi.shape or not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)) or np.any(lo > hi):
                raise ConfigError("invalid continuous action bounds")

    @property
    def discrete_actions(self) -> bool:
        return self.n_actions is not None

    @property
    def action_dim(self) -> int:
        return self.n_actions if self.discrete_actions else len(self.action_low)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "state_dim": self.state_dim,
            "reward_min": self.reward_min,
            "reward_max": self.reward_max,
            "discount": self.discount,
            "n_actions": self.n_actions,
            "action_low": None if self.action_low is None else list(self.action_low),
            "action_high": None if self.action_high is None else list(self.action_high),
            "options": _jsonable(self.options),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        return cls(
            kind=d["kind"],
            state_dim=int(d["state_dim"]),
            reward_min=float(d["reward_min"]),
            reward_max=float(d["reward_max"]),
            discount=float(d["discount"]),
            n_actions=d.get("n_actions"),
            action_low=None if d.get("action_low") is None else tuple(d["action_low"]),
            action_high=None if d.get("action_high") is None else tuple(d["action_high"]),
            options=dict(d.get("options", {})),
        )


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


@dataclass(frozen=True, eq=False)
class Transition:
    s: np.ndarray
    a: Action
    r: float
    s_next: np.ndarray
    done: bool = False

    def to_dict(self) -> dict:
        a = int(self.a) if np.ndim(self.a) == 0 else [float(v) for v in np.ravel(self.a)]
        return {
            "s": [float(v) for v in self.s],
            "a": a,
            "r": float(self.r),
            "s_next": [float(v) for v in self.s_next],
            "done": bool(self.done),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Transition":
        a = d["a"]
        a = int(a) if np.ndim(a) == 0 else np.asarray(a, dtype=np.float64)
        return cls(np.asarray(d["s"], float), a, float(d["r"]), np.asarray(d["s_next"], float), bool(d.get("done", False)))


@dataclass(frozen=True, eq=False)
class Dataset:
    transitions: tuple[Transition, ...]
    env: EnvSpec
    seed: int

    def __post_init__(self):
        if not self.transitions:
            raise ValueError("a dataset needs at least one transition")
        object.__setattr__(self, "transitions", tuple(self.transitions))

    def __len__(self) -> int:
        return len(self.transitions)

    def __getitem__(self, i):
        return self.transitions[i]

    def states(self) -> np.ndarray:
        return np.stack([t.s for t in self.transitions])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(tuple(self.transitions[i] for i in indices), self.env, self.seed)

    def to_json(self) -> str:
        doc = {
            "env": self.env.to_dict(),
            "seed": int(self.seed),
            "transitions": [t.to_dict() for t in self.transitions],
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Dataset":
        doc = json.loads(text)
        return cls(tuple(Transition.from_dict(t) for t in doc["transitions"]), EnvSpec.from_dict(doc["env"]), int(doc["seed"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_json(Path(path).read_text())


# --------------------------------------------------------------------------- environments


class GridLake:
    """Frozen-lake grid.  States are ``(row, col) / (side - 1)`` in [0, 1]^2.

    With probability ``slip`` the move goes to one of the two perpendicular
    directions (equally likely).  Reaching a hole or the goal ends the
    episode; the goal pays 1, everything else 0.
    """

    kind = "gridlake"

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.lake = tuple(spec.options.get("lake", DEFAULT_LAKE))
        self.side = len(self.lake)
        if any(len(row) != self.side for row in self.lake):
            raise ConfigError("lake map must be square")
        self.slip = float(spec.options.get("slip", 0.0))
        self.horizon = int(spec.options.get("horizon", 100))
        self.start = next((i, j) for i, row in enumerate(self.lake) for j, c in enumerate(row) if c == "S")

    @property
    def n_cells(self) -> int:
        return self.side

    def cell(self, s) -> tuple[int, int]:
        idx = np.rint(np.asarray(s, float) * (self.side - 1)).astype(int)
        return int(idx[0]), int(idx[1])

    def state_of(self, cell: tuple[int, int]) -> np.ndarray:
        return np.array(cell, dtype=np.float64) / (self.side - 1)

    def tile(self, cell) -> str:
        return self.lake[cell[0]][cell[1]]

    def is_terminal(self, s) -> bool:
        return self.tile(self.cell(s)) in "HG"

    def terminal_cells(self) -> list[tuple[int, int]]:
        return [(i, j) for i, row in enumerate(self.lake) for j, c in enumerate(row) if c in "HG"]

    def nonterminal_cells(self) -> list[tuple[int, int]]:
        return [(i, j) for i, row in enumerate(self.lake) for j, c in enumerate(row) if c not in "HG"]

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return self.state_of(self.start)

    def _move(self, cell, action: int) -> tuple[int, int]:
        di, dj = _MOVES[action]
        return min(max(cell[0] + di, 0), self.side - 1), min(max(cell[1] + dj, 0), self.side - 1)

    def true_next(self, s, a) -> np.ndarray:
        """Next state under the intended (non-slipping) move."""
        cell = self.cell(s)
        if self.tile(cell) in "HG":
            return self.state_of(cell)
        return self.state_of(self._move(cell, int(a)))

    def step(self, s, a, rng: np.random.Generator) -> Transition:
        a = int(a)
        if not 0 <= a < 4:
            raise ValueError(f"invalid action {a}")
        cell = self.cell(s)
        move = a
        if self.slip > 0 and rng.random() < self.slip:
            move = (a + (1 if rng.random() < 0.5 else 3)) % 4
        nxt = self._move(cell, move)
        tile = self.tile(nxt)
        r = 1.0 if tile == "G" else 0.0
        return Transition(self.state_of(cell), a, r, self.state_of(nxt), tile in "HG")

    def features(self, states) -> np.ndarray:
        """Per-dimension one-hot encoding of ``(row, col)``; shape ``(..., 2 * side)``."""
        states = np.asarray(states, float)
        idx = np.rint(states * (self.side - 1)).astype(int)
        eye = np.eye(self.side)
        return np.concatenate([eye[idx[..., 0]], eye[idx[..., 1]]], axis=-1)

    @property
    def feature_dim(self) -> int:
        return 2 * self.side


class PixelGrid(GridLake):
    """The grid lake observed through ``render_pixel_state``."""

    kind = "pixelgrid"

    def cell(self, s) -> tuple[int, int]:
        s = np.asarray(s, float)
        if s.shape[-1] == 2:
            return super().cell(s)
        return _decode_image(s, self.side)

    def state_of(self, cell) -> np.ndarray:
        return render_pixel_state(cell, self.side, self.lake)

    def position_state(self, s) -> np.ndarray:
        """Normalised (row, col) of an image state."""
        return GridLake.state_of(self, self.cell(s))

    def features(self, states) -> np.ndarray:
        return np.asarray(states, float)

    @property
    def feature_dim(self) -> int:
        return IMAGE_SIDE * IMAGE_SIDE


class PointMass:
    """Linear point mass ``s' = A s + B a`` on the box [-1, 1]^d.

    The default ``A = 0.9 I`` and ``B = 0.1 I`` keep states in the box
    without clipping.  Reward ``-0.5 ||s'||^2`` lies in [-d/2, 0].  Episodes
    are truncated at ``horizon`` steps and never terminate.
    """

    kind = "pointmass"

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        d = spec.state_dim
        self.A = np.asarray(spec.options.get("A", (0.9 * np.eye(d)).tolist()), float)
        self.B = np.asarray(spec.options.get("B", (0.1 * np.eye(d)).tolist()), float)
        if self.A.shape != (d, d) or self.B.shape != (d, spec.action_dim):
            raise ConfigError("dynamics matrices do not match state/action dimensions")
        self.horizon = int(spec.options.get("horizon", 30))
        self.low = np.asarray(spec.action_low, float)
        self.high = np.asarray(spec.action_high, float)
        levels = int(spec.options.get("action_grid", 3))
        axes = [np.linspace(lo, hi, levels) for lo, hi in zip(self.low, self.high)]
        self.action_grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=self.spec.state_dim)

    def true_next(self, s, a) -> np.ndarray:
        return self.A @ np.asarray(s, float) + self.B @ np.asarray(a, float)

    def reward(self, s_next) -> float:
        return -0.5 * float(np.dot(s_next, s_next))

    def is_terminal(self, s) -> bool:
        return False

    def step(self, s, a, rng: np.random.Generator) -> Transition:
        a = np.asarray(a, float)
        if a.shape != self.low.shape or np.any(a < self.low) or np.any(a > self.high):
            raise ValueError(f"invalid action {a}")
        s = np.asarray(s, float)
        s_next = self.true_next(s, a)
        return Transition(s.copy(), a.copy(), self.reward(s_next), s_next, False)

    def features(self, states) -> np.ndarray:
        return np.asarray(states, float)

    @property
    def feature_dim(self) -> int:
        return self.spec.state_dim


ENV_KINDS = {"gridlake": GridLake, "pointmass": PointMass, "pixelgrid": PixelGrid}


def gridlake_spec(slip: float = 0.0, lake: Sequence[str] = DEFAULT_LAKE, discount: float = 0.9, horizon: int = 100) -> EnvSpec:
    return EnvSpec("gridlake", 2, 0.0, 1.0, discount, n_actions=4,
                   options={"lake": list(lake), "slip": slip, "horizon": horizon})


def pixelgrid_spec(slip: float = 0.0, lake: Sequence[str] = DEFAULT_LAKE, discount: float = 0.9, horizon: int = 100) -> EnvSpec:
    return EnvSpec("pixelgrid", IMAGE_SIDE * IMAGE_SIDE, 0.0, 1.0, discount, n_actions=4,
                   options={"lake": list(lake), "slip": slip, "horizon": horizon})


def pointmass_spec(dim: int = 2, discount: float = 0.9, horizon: int = 30, A=None, B=None, action_grid: int = 3) -> EnvSpec:
    options: dict[str, Any] = {"horizon": horizon, "action_grid": action_grid}
    if A is not None:
        options["A"] = np.asarray(A, float).tolist()
    if B is not None:
        options["B"] = np.asarray(B, float).tolist()
    return EnvSpec("pointmass", dim, -0.5 * dim, 0.0, discount, action_low=(-1.0,) * dim,
                   action_high=(1.0,) * dim, options=options)


def make_env(spec: EnvSpec):
    return ENV_KINDS[spec.kind](spec)


# --------------------------------------------------------------------------- rendering


def render_pixel_state(grid_position, side: int = 4, lake: Sequence[str] = DEFAULT_LAKE) -> np.ndarray:
    """16x16 grayscale rendering of the agent at ``grid_position``, flattened.

    Each cell is a square block; holes are dark, the goal mid-grey, the agent
    a bright block with a darker centre.  Distinct positions give distinct
    images.
    """
    i, j = (int(v) for v in grid_position)
    if not (0 <= i < side and 0 <= j < side):
        raise ShapeError(f"position {(i, j)} outside a {side}x{side} grid")
    block = IMAGE_SIDE // side
    img = np.full((IMAGE_SIDE, IMAGE_SIDE), 0.15)
    for r, row in enumerate(lake):
        for c, tile in enumerate(row):
            level = {"H": 0.0, "G": 0.6}.get(tile)
            if level is not None:
                img[r * block:(r + 1) * block, c * block:(c + 1) * block] = level
    img[i * block:(i + 1) * block, j * block:(j + 1) * block] = 1.0
    if block > 2:
        img[i * block + 1:(i + 1) * block - 1, j * block + 1:(j + 1) * block - 1] = 0.8
    return img.ravel()


def _decode_image(img, side: int) -> tuple[int, int]:
    """Position whose agent block is brightest in ``img``."""
    block = IMAGE_SIDE // side
    im = np.asarray(img, float).reshape(IMAGE_SIDE, IMAGE_SIDE)
    means = im.reshape(side, block, side, block).mean(axis=(1, 3))
    k = int(np.argmax(means))
    return k // side, k % side


# --------------------------------------------------------------------------- datasets

POLICIES = ("uniform", "epsilon_greedy")


def random_action(env, rng: np.random.Generator) -> Action:
    if env.spec.discrete_actions:
        return int(rng.integers(env.spec.n_actions))
    return rng.uniform(env.low, env.high)


def generate_dataset(
    spec: EnvSpec,
    policy_tag: str,
    n: int,
    seed: int,
    policy=None,
    epsilon: float = 0.1,
    exploring_starts: bool = False,
) -> Dataset:
    """Roll out ``n`` transitions, resetting at terminals and at the horizon.

    ``policy_tag`` is ``"uniform"`` or ``"epsilon_greedy"``; the latter
    needs ``policy(state) -> action`` and explores with probability
    ``epsilon``.  With ``exploring_starts`` grid episodes begin in a
    uniformly drawn non-terminal cell instead of the start cell.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if policy_tag not in POLICIES:
        raise ValueError(f"policy_tag must be one of {POLICIES}")
    if policy_tag == "epsilon_greedy" and policy is None:
        raise ValueError("epsilon_greedy needs a policy")
    env = make_env(spec)
    rng = np.random.default_rng(seed)
    out: list[Transition] = []

    def reset():
        if exploring_starts and isinstance(env, GridLake):
            cells = env.nonterminal_cells()
            return env.state_of(cells[int(rng.integers(len(cells)))])
        return env.reset(rng)

    s = reset()
    t = 0
    while len(out) < n:
        if policy_tag == "uniform" or rng.random() < epsilon:
            a = random_action(env, rng)
        else:
            a = policy(s)
        tr = env.step(s, a, rng)
        out.append(tr)
        t += 1
        if tr.done or t >= env.horizon:
            s, t = reset(), 0
        else:
            s = tr.s_next
    return Dataset(tuple(out), spec, seed)


def validate_transition(env, tr: Transition) -> None:
    """Raise ``ValueError`` unless ``tr`` respects the environment's bounds."""
    spec = env.spec
    if not spec.reward_min <= tr.r <= spec.reward_max:
        raise ValueError(f"reward {tr.r} outside [{spec.reward_min}, {spec.reward_max}]")
    for name, s in (("s", tr.s), ("s_next", tr.s_next)):
        if s.shape != (spec.state_dim,) or not np.all(np.isfinite(s)):
            raise ValueError(f"{name} has wrong shape or non-finite entries")
        lo, hi = (0.0, 1.0) if spec.kind != "pointmass" else (-1.0, 1.0)
        if np.any(s < lo - 1e-12) or np.any(s > hi + 1e-12):
            raise ValueError(f"{name} outside state bounds")
    if spec.discrete_actions:
        if not (np.ndim(tr.a) == 0 and 0 <= int(tr.a) < spec.n_actions):
            raise ValueError("invalid discrete action")
    else:
        a = np.asarray(tr.a, float)
        if a.shape != (spec.action_dim,) or np.any(a < env.low) or np.any(a > env.high):
            raise ValueError("invalid continuous action")
