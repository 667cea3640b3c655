"""Attacker prior knowledge: the state prior, reward bounds and a learned
transition model, plus the three regularizers built from them."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from frlinv.attack.optim import Optimizer, OptimizerConfig
from frlinv.envs import Dataset, EnvSpec, make_env
from frlinv.errors import ConfigError, NumericError, ShapeError
from frlinv.numcore import autodiff as ad
from frlinv.numcore.network import MlpSpec, QNetwork, mlp, param_layers


@dataclass(frozen=True)
class RegWeights:
    """Regularizer weights: objective = match + lam * (alpha R_s + beta R_r + gamma R_f)."""

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "lam"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"weight {name} must be a finite non-negative number")

    @classmethod
    def gia(cls) -> "RegWeights":
        """The unregularized baseline."""
        return cls(0.0, 0.0, 0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma, self.lam])

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "RegWeights":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class StatePrior:
    mu: np.ndarray
    n_samples: int
    source: str

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64)
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)


def dataset_id(dataset: Dataset) -> str:
    return hashlib.sha256(dataset.to_json().encode()).hexdigest()[:16]


def prior_count(n_total: int, fraction: float = 0.003, floor: int = 30) -> int:
    """Default prior size: a fraction of the data with a small-sample floor."""
    return int(min(n_total, max(floor, round(fraction * n_total))))


def estimate_state_prior(dataset: Dataset, count, seed: int) -> StatePrior:
    """Mean of ``count`` states drawn without replacement.

    ``count`` is a sample count (int) or a fraction of the dataset (float).
    """
    n = len(dataset)
    if isinstance(count, float):
        if not 0.0 < count <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")
        count = max(1, int(round(count * n)))
    count = int(count)
    if not 1 <= count <= n:
        raise ValueError(f"prior sample count must be in [1, {n}], got {count}")
    idx = np.sort(np.random.default_rng(seed).choice(n, size=count, replace=False))
    states = np.stack([dataset[i].s for i in idx])
    return StatePrior(states.mean(axis=0), count, dataset_id(dataset))


# --------------------------------------------------------------------------- regularizers (plain values)


def reg_state(s, prior) -> float:
    """Squared distance of a state to the prior mean."""
    mu = prior.mu if isinstance(prior, StatePrior) else np.asarray(prior, float)
    s = np.asarray(s, float)
    if s.shape != mu.shape:
        raise ShapeError(f"state shape {s.shape} does not match prior {mu.shape}")
    return float(np.sum((s - mu) ** 2))


def reg_reward(r: float, r_min: float, r_max: float) -> float:
    """Squared hinge outside ``[r_min, r_max]``; exactly zero inside."""
    if r_min > r_max:
        raise ValueError("r_min must not exceed r_max")
    return max(r - r_max, 0.0) ** 2 + max(r_min - r, 0.0) ** 2


def reg_dynamics(s, a, s_next, model: "TransitionModel") -> float:
    """Squared distance between ``f(s, a)`` and ``s_next`` in model space."""
    pred = model.predict(np.asarray(s, float)[None], [a])[0]
    target = model.encode_states(np.asarray(s_next, float)[None])[0]
    if pred.shape != target.shape:
        raise ShapeError("model output does not match s_next")
    return float(np.sum((pred - target) ** 2))


# --------------------------------------------------------------------------- transition model


@dataclass(frozen=True, eq=False)
class TransitionModel:
    """Learned ``f(s, a) -> s'`` acting on network features.

    For the grid, states are per-dimension one-hot vectors and actions
    one-hot; for the point mass both are raw coordinates.
    """

    net: QNetwork
    env: EnvSpec
    train_size: int
    val_mse: float

    def encode_states(self, states: np.ndarray) -> np.ndarray:
        return make_env(self.env).features(states)

    def encode_actions(self, actions) -> np.ndarray:
        if self.env.discrete_actions:
            return np.eye(self.env.n_actions)[[int(a) for a in actions]]
        return np.stack([np.asarray(a, float) for a in actions])

    def predict(self, states: np.ndarray, actions) -> np.ndarray:
        x = np.concatenate([self.encode_states(states), self.encode_actions(actions)], axis=-1)
        return self.net(x)

    def apply(self, s_feat, a_enc) -> ad.Tensor:
        """Differentiable forward on already-encoded inputs of shape ``(..., B, .)``."""
        layers = [(ad.Tensor(W), ad.Tensor(b)) for W, b in self.net.layers()]
        return mlp(layers, ad.concat([s_feat, a_enc], axis=-1), self.net.spec.activation)


def model_spec(env_spec: EnvSpec, hidden_dims=None, activation: str = "tanh") -> MlpSpec:
    env = make_env(env_spec)
    if hidden_dims is None:
        hidden_dims = () if env_spec.kind == "pointmass" else (32,)
    return MlpSpec(env.feature_dim + env_spec.action_dim, tuple(hidden_dims), env.feature_dim, activation)


def train_transition_model(
    prior_data: Dataset,
    hidden_dims=None,
    epochs: int = 2000,
    seed: int = 0,
    learning_rate: float = 0.01,
    activation: str = "tanh",
) -> TransitionModel:
    """Full-batch regression of s' on (s, a) with an 80/20 train/validation split.

    ``hidden_dims=None`` picks a linear model for the point mass and one
    hidden layer of 32 units for grid environments.
    """
    if len(prior_data) == 0:
        raise ValueError("prior data is empty")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    env_spec = prior_data.env
    spec = model_spec(env_spec, hidden_dims, activation)
    net = QNetwork.init(spec, seed)
    shell = TransitionModel(net, env_spec, 0, float("nan"))
    trs = list(prior_data.transitions)
    X = np.concatenate([shell.encode_states(np.stack([t.s for t in trs])), shell.encode_actions([t.a for t in trs])], axis=1)
    Y = shell.encode_states(np.stack([t.s_next for t in trs]))
    perm = np.random.default_rng(seed).permutation(len(trs))
    n_train = max(1, int(round(0.8 * len(trs)))) if len(trs) > 1 else 1
    tr_idx, va_idx = perm[:n_train], perm[n_train:]
    if va_idx.size == 0:
        va_idx = tr_idx
    Xt, Yt = X[tr_idx], Y[tr_idx]

    params = {"theta": net.params.copy()}
    opt = Optimizer(OptimizerConfig("adam", learning_rate, epochs), params)
    for _ in range(epochs):
        theta = ad.variable(params["theta"])
        pred = mlp(param_layers(spec, theta), Xt, activation)
        loss = ad.mean(ad.square(ad.sub(pred, Yt)))
        if not np.isfinite(loss.value):
            raise NumericError("transition model training diverged")
        (g,) = ad.grad(loss, [theta])
        opt.step(params, {"theta": g.value})
    net = net.with_params(params["theta"])
    val = float(np.mean((net(X[va_idx]) - Y[va_idx]) ** 2))
    if not np.isfinite(val):
        raise NumericError("transition model produced non-finite predictions")
    return TransitionModel(net, env_spec, int(n_train), val)
