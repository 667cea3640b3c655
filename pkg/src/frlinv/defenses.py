"""Gradient-side defenses applied by each agent before upload."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from frlinv.errors import ConfigError
from frlinv.frl import GradientPacket

DEFENSE_KINDS = ("none", "gaussian", "laplace", "quantize")
QUANT_BITS = (4, 8)


@dataclass(frozen=True)
class DefenseSpec:
    """Which defense to apply and its strength.

    Attributes:
        kind: ``none``, ``gaussian``, ``laplace`` or ``quantize``.
        variance: per-coordinate noise variance (noise kinds).
        bits: code width for ``quantize``.
        seed: root of the per-(round, agent) noise streams.
    """

    kind: str = "none"
    variance: float = 0.0
    bits: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ConfigError(f"defense kind must be one of {DEFENSE_KINDS}")
        if self.kind in ("gaussian", "laplace") and not (np.isfinite(self.variance) and self.variance > 0):
            raise ConfigError("noise defenses need a positive variance")
        if self.kind == "quantize" and self.bits not in QUANT_BITS:
            raise ConfigError(f"bits must be one of {QUANT_BITS}")

    @property
    def label(self) -> str:
        if self.kind in ("gaussian", "laplace"):
            return f"{self.kind}:{self.variance:g}"
        if self.kind == "quantize":
            return f"quantize:{self.bits}"
        return "none"

    def rng(self, agent_id: int, round_: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, round_, agent_id])

    def apply(self, packet: GradientPacket, agent_id: int | None = None, round_: int | None = None,
              rng: np.random.Generator | None = None) -> GradientPacket:
        if self.kind == "none":
            return packet
        if self.kind == "quantize":
            return quantize(packet, self.bits)
        if rng is None:
            rng = self.rng(packet.agent_id if agent_id is None else agent_id,
                           packet.round if round_ is None else round_)
        return apply_noise(packet, self, rng)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict | None) -> "DefenseSpec":
        return cls(**(d or {}))


def laplace_scale(variance: float) -> float:
    """Laplace scale ``b`` whose variance ``2 b^2`` equals ``variance``."""
    return float(np.sqrt(variance / 2.0))


def apply_noise(packet: GradientPacket, spec: DefenseSpec, rng: np.random.Generator) -> GradientPacket:
    """Add i.i.d. zero-mean noise of variance ``spec.variance`` to every coordinate."""
    if spec.kind == "none":
        return packet
    n = packet.grad.size
    if spec.kind == "gaussian":
        noise = rng.normal(0.0, np.sqrt(spec.variance), size=n)
    elif spec.kind == "laplace":
        noise = rng.laplace(0.0, laplace_scale(spec.variance), size=n)
    else:
        raise ConfigError(f"{spec.kind!r} is not a noise defense")
    return packet.with_grad(packet.grad + noise, spec.label)


def quantize_vector(g: np.ndarray, bits: int) -> np.ndarray:
    """Symmetric per-vector quantization, returned dequantized.

    ``scale = max|g|`` and codes are ``g / scale * (2^(bits-1) - 1)``
    rounded to the nearest integer with ties toward zero.
    """
    if bits not in QUANT_BITS:
        raise ConfigError(f"bits must be one of {QUANT_BITS}")
    g = np.asarray(g, dtype=np.float64)
    scale = float(np.max(np.abs(g))) if g.size else 0.0
    if scale == 0.0:
        return g.copy()
    levels = 2 ** (bits - 1) - 1
    x = g / scale * levels
    codes = np.sign(x) * np.ceil(np.abs(x) - 0.5)
    return codes / levels * scale


def quantize(packet: GradientPacket, bits: int) -> GradientPacket:
    if not np.any(packet.grad):
        return packet.with_grad(packet.grad, f"quantize:{bits}")
    return packet.with_grad(quantize_vector(packet.grad, bits), f"quantize:{bits}")
