"""Final-time objectives and their adjoint final conditions.

Every objective is a smooth function of the final velocities.  Two final
conditions are provided:

* ``final_vec(V)`` gives ``-N dJ/dv_i`` per particle (discrete adjoint).
* ``final_scalar(V, at)`` gives ``-dJ/df`` evaluated at the points ``at``
  (continuous adjoint).  Quadratic misfits freeze their residual weights at
  the ensemble ``V``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import AXES, ParticleEnsemble, axis_index

KINDS = ("moment2", "moment4", "matching", "least_squares")
_ALIASES = {"T": "moment2", "m2": "moment2", "m4": "moment4", "lsq": "least_squares"}


def _velocities(ens) -> np.ndarray:
    return ens.velocities if isinstance(ens, ParticleEnsemble) else np.asarray(ens, dtype=np.float64)


def moment_vector(V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis second and fourth moments (T, m4)."""
    v2 = V * V
    return v2.mean(axis=0), (v2 * v2).mean(axis=0)


@dataclass(frozen=True)
class Objective:
    kind: str
    axis: Optional[int] = None
    d_obs: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"objective kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind in ("moment2", "moment4") and self.axis is None:
            raise ValueError(f"{self.kind} objective needs an axis")
        if self.kind == "least_squares":
            if self.d_obs is None or len(self.d_obs) != 3:
                raise ValueError("least_squares objective needs d_obs with 3 entries")

    @property
    def name(self) -> str:
        if self.kind == "moment2":
            return f"T_{AXES[self.axis]}"
        if self.kind == "moment4":
            return f"m4_{AXES[self.axis]}"
        return self.kind

    @property
    def is_moment(self) -> bool:
        return self.kind in ("moment2", "moment4")

    @property
    def power(self) -> int:
        return 2 if self.kind == "moment2" else 4

    def evaluate(self, ens) -> float:
        V = _velocities(ens)
        if self.is_moment:
            x = V[:, self.axis]
            return float(np.mean(x**self.power))
        T, m4 = moment_vector(V)
        if self.kind == "matching":
            return float(np.sum((T - 0.5 * m4) ** 2))
        return float(np.sum((np.asarray(self.d_obs) - m4) ** 2))

    def final_vec(self, ens) -> np.ndarray:
        """``-N dJ/dv_i`` for every particle, shape (N, 3)."""
        V = _velocities(ens)
        out = np.zeros_like(V)
        if self.is_moment:
            x = V[:, self.axis]
            out[:, self.axis] = -self.power * x ** (self.power - 1)
            return out
        T, m4 = moment_vector(V)
        if self.kind == "matching":
            res = T - 0.5 * m4
            return -2.0 * res * (2.0 * V - 2.0 * V**3)
        return 8.0 * (np.asarray(self.d_obs) - m4) * V**3

    def final_scalar(self, ens, at=None) -> np.ndarray:
        """``-dJ/df`` at the points ``at`` (default: the ensemble itself)."""
        V = _velocities(ens)
        P = V if at is None else np.asarray(at, dtype=np.float64)
        if self.is_moment:
            return -P[:, self.axis] ** self.power
        T, m4 = moment_vector(V)
        P2 = P * P
        if self.kind == "matching":
            res = T - 0.5 * m4
            return -2.0 * (P2 - 0.5 * P2 * P2) @ res
        return 2.0 * (P2 * P2) @ (np.asarray(self.d_obs) - m4)


def make_objective(kind: str, axis=None, d_obs: Optional[Sequence[float]] = None) -> Objective:
    kind = _ALIASES.get(kind, kind)
    ax = axis_index(axis) if axis is not None else None
    obs = tuple(float(x) for x in d_obs) if d_obs is not None else None
    return Objective(kind, ax, obs)


def moment_objectives() -> list[Objective]:
    """The six moment objectives T_x, T_y, T_z, m4_x, m4_y, m4_z in that order."""
    return [make_objective("moment2", a) for a in AXES] + [make_objective("moment4", a) for a in AXES]


__all__ = ["KINDS", "Objective", "make_objective", "moment_objectives", "moment_vector"]
