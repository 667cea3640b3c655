"""Exception types shared across the package."""

from __future__ import annotations


class FrlInvError(Exception):
    """Base class for all package errors."""


class ShapeError(FrlInvError, ValueError):
    """Array dimensions do not match what an operation expects."""


class NumericError(FrlInvError, ArithmeticError):
    """A non-finite value appeared during a computation.

    Attributes:
        layer: index of the network layer where the value was detected,
            or None when the failure is not tied to a layer.
    """

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer


class ProtocolError(FrlInvError):
    """Packets or snapshots that cannot be combined (fingerprint mismatch etc.)."""


class ConfigError(FrlInvError, ValueError):
    """Invalid experiment or component configuration."""
