"""Strain-dependent stiffness blending and material presets.

``StiffnessCurve`` maps a scalar strain to a blending weight in (0, 1):
1 keeps an element at its rest shape, 0 lets it follow the rigidly fitted
current shape. Curves are piecewise-linear tables calibrated externally;
presets carry first-order Mooney-Rivlin constants as metadata.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


class NonPositiveSingularValueError(ValueError):
    pass


@dataclass
class StiffnessCurve:
    """Monotone-in-strain knot table, clamped outside the knot range."""

    strains: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.strains = np.asarray(self.strains, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.strains.ndim != 1 or self.strains.shape != self.values.shape:
            raise ConfigError("stiffness curve needs matching 1-d strain/value arrays")
        if self.strains.size == 0:
            raise ConfigError("stiffness curve needs at least one knot")
        if np.any(np.diff(self.strains) <= 0.0):
            raise ConfigError("stiffness curve strains must strictly increase")
        if np.any((self.values <= 0.0) | (self.values >= 1.0)):
            raise ConfigError("stiffness values must lie strictly inside (0, 1)")

    @classmethod
    def constant(cls, value: float) -> "StiffnessCurve":
        return cls(np.array([0.0]), np.array([value]))

    @classmethod
    def from_knots(cls, knots) -> "StiffnessCurve":
        k = np.asarray(knots, dtype=np.float64)
        if k.ndim != 2 or k.shape[1] != 2:
            raise ConfigError("knots must be a list of [strain, value] pairs")
        return cls(k[:, 0], k[:, 1])

    def evaluate(self, strain) -> np.ndarray | float:
        """Piecewise-linear interpolation, clamped to the end knots."""
        out = np.interp(strain, self.strains, self.values)
        return float(out) if np.isscalar(strain) else out

    def knots(self) -> list[list[float]]:
        return [[float(s), float(v)] for s, v in zip(self.strains, self.values)]


def strain_measure(sigma) -> float:
    """Largest deviation of a principal stretch from 1 (order-independent)."""
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(s <= 0.0):
        raise NonPositiveSingularValueError(f"singular values must be positive, got {s}")
    return float(np.max(np.abs(s - 1.0)))


def strain_measures(sigma: np.ndarray) -> np.ndarray:
    """Batch form of :func:`strain_measure` over ``(n, 3)`` stretches."""
    return np.max(np.abs(sigma - 1.0), axis=1)


@dataclass
class MaterialPreset:
    name: str
    mooney_c1: float  # MPa
    mooney_c2: float  # MPa
    curve: StiffnessCurve = field(default_factory=lambda: StiffnessCurve.constant(0.5))

    def __post_init__(self):
        if self.mooney_c1 <= 0.0 or self.mooney_c2 <= 0.0:
            raise ConfigError("Mooney-Rivlin constants must be positive")


def builtin_presets() -> dict[str, MaterialPreset]:
    """Silicone rubbers commonly cast for pneumatic robots; constant blend 0.5
    until a calibrated strain table is supplied."""
    return {
        "default": MaterialPreset("default", mooney_c1=0.05, mooney_c2=0.01),
        "ecoflex-0030": MaterialPreset("ecoflex-0030", mooney_c1=0.0418, mooney_c2=0.0106),
        "dragon-skin-20": MaterialPreset("dragon-skin-20", mooney_c1=0.119, mooney_c2=0.023),
    }
