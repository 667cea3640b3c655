"""Small feed-forward networks on top of the autodiff tape.

Parameters live in one flat float64 vector in canonical order: layer by
layer, each layer's weight matrix (row-major, shape ``out x in``) followed
by its bias.  Every operation here is a pure function of its arguments.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from frlinv.errors import NumericError, ShapeError
from frlinv.numcore import autodiff as ad

ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ShapeError(f"all layer sizes must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def param_count(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(d["input_dim"], tuple(d.get("hidden_dims", ())), d["output_dim"], d.get("activation", "tanh"))


def _slices(spec: MlpSpec) -> list[tuple[slice, slice, tuple[int, int]]]:
    out, pos = [], 0
    for o, i in spec.layer_shapes:
        w = slice(pos, pos + o * i)
        pos += o * i
        b = slice(pos, pos + o)
        pos += o
        out.append((w, b, (o, i)))
    return out


def unflatten(spec: MlpSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.param_count,):
        raise ShapeError(f"expected {spec.param_count} parameters, got shape {params.shape}")
    return [(params[w].reshape(shape), params[b].copy()) for w, b, shape in _slices(spec)]


def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([np.ravel(W), np.ravel(b)]) for W, b in layers])


@dataclass(frozen=True, eq=False)
class QNetwork:
    """An MLP with its parameters; immutable once built."""

    spec: MlpSpec
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = np.array(self.params, dtype=np.float64)
        if p.shape != (self.spec.param_count,):
            raise ShapeError(f"expected {self.spec.param_count} parameters, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise NumericError("network parameters contain non-finite values")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    @property
    def param_count(self) -> int:
        return self.spec.param_count

    @classmethod
    def init(cls, spec: MlpSpec, seed: int, scale: float = 1.0) -> "QNetwork":
        """Gaussian weights with variance ``scale / fan_in``; small Gaussian biases."""
        rng = np.random.default_rng(seed)
        layers = []
        for o, i in spec.layer_shapes:
            W = rng.normal(0.0, np.sqrt(scale / i), size=(o, i))
            b = rng.normal(0.0, 0.1 * np.sqrt(scale), size=o)
            layers.append((W, b))
        return cls(spec, flatten(layers))

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return unflatten(self.spec, self.params)

    def with_params(self, params: np.ndarray) -> "QNetwork":
        return QNetwork(self.spec, params)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.params.tobytes()).hexdigest()[:16]

    def __call__(self, x) -> np.ndarray:
        return forward(self, x)


# --------------------------------------------------------------------------- taped evaluation


def param_layers(spec: MlpSpec, theta: ad.Tensor) -> list[tuple[ad.Tensor, ad.Tensor]]:
    """Split a flat parameter tensor of shape ``(..., P)`` into per-layer tensors.

    Leading axes index independent parameter copies (one per optimisation
    run); weights come back as ``(..., out, in)`` and biases as
    ``(..., 1, out)`` so they broadcast against ``(..., batch, features)``.
    """
    lead = theta.shape[:-1]
    out = []
    for w, b, (o, i) in _slices(spec):
        W = ad.reshape(theta[..., w], lead + (o, i))
        bias = ad.reshape(theta[..., b], lead + (1, o)) if lead else theta[..., b]
        out.append((W, bias))
    return out


def mlp(
    layers: Sequence[tuple[ad.Tensor, ad.Tensor]],
    x: ad.Tensor,
    activation: str = "tanh",
    check_finite: bool = False,
) -> ad.Tensor:
    """Apply the MLP to ``x`` of shape ``(..., batch, in)``."""
    act = ad.tanh if activation == "tanh" else ad.relu
    h = ad.as_tensor(x)
    last = len(layers) - 1
    for k, (W, b) in enumerate(layers):
        h = ad.add(ad.matmul(h, ad.transpose(W)), b)
        if k < last:
            h = act(h)
        if check_finite and not np.all(np.isfinite(h.value)):
            raise NumericError("non-finite activation", layer=k)
    return h


def forward(net: QNetwork, x) -> np.ndarray:
    """Network output for one input vector (or a batch of rows)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.spec.input_dim:
        raise ShapeError(f"input must have trailing dimension {net.spec.input_dim}, got shape {x.shape}")
    layers = [(ad.Tensor(W), ad.Tensor(b)) for W, b in net.layers()]
    with ad.no_record():
        out = mlp(layers, ad.Tensor(np.atleast_2d(x)), net.spec.activation).value
    return out[0] if x.ndim == 1 else out


# --------------------------------------------------------------------------- losses

LossBuilder = Callable[[list, QNetwork], ad.Tensor]


def _as_batch(x, dim: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x2 = np.atleast_2d(x)
    if x2.ndim != 2 or x2.shape[-1] != dim:
        raise ShapeError(f"{name} must have trailing dimension {dim}, got shape {x.shape}")
    return x2


def _squared_error(loss_inputs, spec: MlpSpec) -> LossBuilder:
    x, y = loss_inputs
    x = _as_batch(x, spec.input_dim, "input")
    y = _as_batch(y, spec.output_dim, "target")
    if y.shape[0] != x.shape[0]:
        raise ShapeError("input and target batch sizes differ")

    def build(layers, net):
        out = mlp(layers, ad.Tensor(x), net.spec.activation, check_finite=True)
        return ad.mul(ad.tsum(ad.square(ad.sub(out, y))), 0.5 / x.shape[0])

    return build


def _q_squared_error(loss_inputs, spec: MlpSpec) -> LossBuilder:
    x, actions, y = loss_inputs
    x = _as_batch(x, spec.input_dim, "input")
    actions = np.atleast_1d(np.asarray(actions, dtype=int))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if not (len(actions) == len(y) == x.shape[0]):
        raise ShapeError("input, action and target batch sizes differ")
    if actions.min() < 0 or actions.max() >= spec.output_dim:
        raise ShapeError("action index out of range")
    mask = np.eye(spec.output_dim)[actions]

    def build(layers, net):
        out = mlp(layers, ad.Tensor(x), net.spec.activation, check_finite=True)
        q = ad.tsum(ad.mul(out, mask), axis=-1)
        return ad.mul(ad.tsum(ad.square(ad.sub(q, y))), 0.5 / x.shape[0])

    return build


LOSSES = {"squared_error": _squared_error, "q_squared_error": _q_squared_error}


def param_grad(net: QNetwork, loss_fn_tag, loss_inputs=None) -> np.ndarray:
    """Gradient of a scalar loss with respect to the flat parameters.

    ``loss_fn_tag`` is either a key of ``LOSSES`` (with ``loss_inputs``) or
    a callable ``(layers, net) -> scalar Tensor`` taking taped layers.
    """
    if callable(loss_fn_tag):
        build = loss_fn_tag
    elif loss_fn_tag in LOSSES:
        build = LOSSES[loss_fn_tag](loss_inputs, net.spec)
    else:
        raise ValueError(f"unknown loss {loss_fn_tag!r}")
    theta = ad.variable(net.params)
    loss = build(param_layers(net.spec, theta), net)
    if not np.isfinite(loss.value):
        raise NumericError("non-finite loss", layer=len(net.spec.layer_shapes) - 1)
    (g,) = ad.grad(loss, [theta])
    _check_grad_finite(net.spec, g.value)
    return g.value


def _check_grad_finite(spec: MlpSpec, g: np.ndarray) -> None:
    if np.all(np.isfinite(g)):
        return
    for k, (w, b, _) in enumerate(_slices(spec)):
        if not (np.all(np.isfinite(g[..., w])) and np.all(np.isfinite(g[..., b]))):
            raise NumericError("non-finite parameter gradient", layer=k)


# --------------------------------------------------------------------------- gradient matching

OUTER_LOSSES = ("l2", "cosine")


def outer_loss(fake: ad.Tensor, target, tag: str = "l2") -> ad.Tensor:
    """Distance between gradients along the last axis; one value per leading index."""
    target = ad.as_tensor(target)
    if tag == "l2":
        return ad.tsum(ad.square(ad.sub(fake, target)), axis=-1)
    if tag == "cosine":
        dot = ad.tsum(ad.mul(fake, target), axis=-1)
        nf = ad.sqrt(ad.add(ad.tsum(ad.square(fake), axis=-1), 1e-24))
        nt = ad.sqrt(ad.add(ad.tsum(ad.square(target), axis=-1), 1e-24))
        return ad.sub(1.0, ad.div(dot, ad.mul(nf, nt)))
    raise ValueError(f"outer loss must be one of {OUTER_LOSSES}, got {tag!r}")


InnerLoss = Callable[[list, ad.Tensor], ad.Tensor]


def default_inner_loss(spec: MlpSpec) -> InnerLoss:
    """Candidate ``[x, y]`` with loss ``0.5 * ||f(x) - y||^2`` (supervised inversion)."""

    def inner(layers, candidate):
        x = ad.reshape(candidate[: spec.input_dim], (1, spec.input_dim))
        y = candidate[spec.input_dim :]
        return ad.mul(ad.tsum(ad.square(ad.sub(mlp(layers, x, spec.activation), y))), 0.5)

    return inner


def _matching_value_and_grad(net, candidate, target_grad, outer_loss_tag, inner_loss, need_grad=True):
    cand = ad.variable(candidate)
    theta = ad.variable(net.params)
    inner = inner_loss(param_layers(net.spec, theta), cand)
    (fake,) = ad.grad(inner, [theta], create_graph=True)
    value = outer_loss(fake, target_grad, outer_loss_tag)
    if not np.isfinite(value.value):
        raise NumericError("non-finite gradient-matching loss")
    if not need_grad:
        return float(value.value), None
    (g,) = ad.grad(value, [cand])
    if not np.all(np.isfinite(g.value)):
        raise NumericError("non-finite input gradient")
    return float(value.value), g.value


def _validate_matching(net, candidate_inputs, target_grad, inner_loss):
    target_grad = np.asarray(target_grad, dtype=np.float64)
    if target_grad.shape != (net.param_count,):
        raise ShapeError(f"target gradient must have length {net.param_count}, got shape {target_grad.shape}")
    candidate = np.asarray(candidate_inputs, dtype=np.float64).ravel()
    if inner_loss is None:
        if candidate.size != net.spec.input_dim + net.spec.output_dim:
            raise ShapeError("default inner loss expects candidate = [input, target]")
        inner_loss = default_inner_loss(net.spec)
    return candidate, target_grad, inner_loss


def matching_loss(net, candidate_inputs, target_grad, outer_loss_tag="l2", inner_loss=None) -> float:
    """``outer(grad_theta inner(candidate), target_grad)`` as a float."""
    candidate, target_grad, inner_loss = _validate_matching(net, candidate_inputs, target_grad, inner_loss)
    return _matching_value_and_grad(net, candidate, target_grad, outer_loss_tag, inner_loss, need_grad=False)[0]


def input_grad_of_matching_loss(
    net: QNetwork,
    candidate_inputs,
    target_grad,
    outer_loss_tag: str = "l2",
    inner_loss: InnerLoss | None = None,
    finite_difference: bool = False,
    fd_eps: float = 1e-4,
) -> np.ndarray:
    """Gradient of the gradient-matching loss with respect to the candidate inputs.

    The analytic route differentiates through the taped parameter gradient
    (double backprop).  ``finite_difference=True`` switches to central
    differences of the scalar outer loss, one coordinate at a time.
    """
    candidate, target_grad, inner_loss = _validate_matching(net, candidate_inputs, target_grad, inner_loss)
    if not finite_difference:
        return _matching_value_and_grad(net, candidate, target_grad, outer_loss_tag, inner_loss)[1]
    g = np.zeros_like(candidate)
    for i in range(candidate.size):
        step = np.zeros_like(candidate)
        step[i] = fd_eps
        hi = _matching_value_and_grad(net, candidate + step, target_grad, outer_loss_tag, inner_loss, False)[0]
        lo = _matching_value_and_grad(net, candidate - step, target_grad, outer_loss_tag, inner_loss, False)[0]
        g[i] = (hi - lo) / (2 * fd_eps)
    return g
