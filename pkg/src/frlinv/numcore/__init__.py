"""Dense numerics: autodiff tape and small MLPs."""

from frlinv.numcore.network import (
    MlpSpec,
    QNetwork,
    flatten,
    forward,
    input_grad_of_matching_loss,
    matching_loss,
    param_grad,
    unflatten,
)

__all__ = [
    "MlpSpec",
    "QNetwork",
    "flatten",
    "forward",
    "input_grad_of_matching_loss",
    "matching_loss",
    "param_grad",
    "unflatten",
]
