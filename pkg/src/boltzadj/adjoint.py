"""Discrete adjoint of the logged DSMC run.

Adjoint vectors are propagated backward through the collision log with the
transposed collision operator; the parameter gradient then follows from the
initial-state sensitivities.  Arrays of shape ``(K, N, 3)`` carry K
objectives through one backward sweep.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    PARAM_NAMES,
    CollisionLog,
    InitialConditionParams,
    NormalDrawCache,
    StepRecords,
    apply_B,
    axis_index,
)


@dataclass
class AdjointEnsemble:
    gammas: np.ndarray
    time_index: int

    def __post_init__(self):
        g = np.asarray(self.gammas, dtype=np.float64)
        if g.shape[-1] != 3:
            raise ValueError(f"adjoint vectors must have a trailing axis of 3, got {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite adjoint value")
        self.gammas = g

    @property
    def N(self) -> int:
        return self.gammas.shape[-2]


@dataclass
class GradientReport:
    objective: str
    alpha_names: list
    values: list
    method: str
    N: int
    seed: Optional[int] = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "objective": self.objective,
            "alpha_names": list(self.alpha_names),
            "values": [float(v) for v in self.values],
            "method": self.method,
            "N": int(self.N),
            "seed": self.seed,
        }
        out.update(self.extras)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


def final_condition(obj, final) -> AdjointEnsemble:
    return AdjointEnsemble(obj.final_vec(final), getattr(final, "time_index", 0))


def backward_step(adj: AdjointEnsemble, rec: StepRecords) -> AdjointEnsemble:
    g = adj.gammas.copy()
    _backward_inplace(g, rec)
    return AdjointEnsemble(g, adj.time_index - 1)


def _backward_inplace(g: np.ndarray, rec: StepRecords) -> None:
    if not len(rec):
        return
    rec.check_indices(g.shape[-2])
    a, b = apply_B(rec.sigma, rec.alpha_hat, g[..., rec.i, :], g[..., rec.j, :])
    g[..., rec.i, :] = a
    g[..., rec.j, :] = b


def run_adjoint(
    adjF: AdjointEnsemble,
    log: CollisionLog,
    observer: Optional[Callable[[int, np.ndarray], None]] = None,
) -> AdjointEnsemble:
    """Sweep k = M-1 .. 0; ``observer(k, gammas)`` sees each state, k = M first."""
    g = adjF.gammas.copy()
    M = log.M
    if observer is not None:
        observer(M, g)
    for k in range(M - 1, -1, -1):
        _backward_inplace(g, log.steps[k])
        if observer is not None:
            observer(k, g)
    return AdjointEnsemble(g, 0)


def gradient_components(
    gammas0: np.ndarray, cache: NormalDrawCache, params: InitialConditionParams, axes: Sequence = PARAM_NAMES
) -> np.ndarray:
    """``-(1/N) sum_i gamma_0i . dv_0i/dT_p`` for each requested axis; shape (..., len(axes))."""
    g = np.asarray(gammas0)
    N = cache.N
    if g.shape[-2] != N:
        raise ValueError(f"adjoint has {g.shape[-2]} particles, sensitivities have {N}")
    T = params.as_array()
    out = []
    for a in axes:
        p = axis_index(a)
        s = cache.draws[:, p] * (math.sqrt(T[p]) / (2.0 * T[p]))
        out.append(-(g[..., :, p] @ s) / N)
    return np.stack(out, axis=-1)


def gradient(adj0: AdjointEnsemble, sens: Sequence[np.ndarray]) -> np.ndarray:
    """Gradient from explicit per-parameter sensitivity arrays of shape (N, 3)."""
    g = adj0.gammas
    out = []
    for s in sens:
        s = np.asarray(s)
        if s.shape != g.shape[-2:]:
            raise ValueError(f"sensitivity shape {s.shape} does not match adjoint {g.shape[-2:]}")
        out.append(-np.einsum("...ij,ij->...", g, s) / g.shape[-2])
    return np.stack(out, axis=-1)


def adjoint_dsmc_gradient(run, objectives, axes: Sequence = PARAM_NAMES) -> np.ndarray:
    """Gradients of several objectives from one forward run; shape (K, len(axes))."""
    objectives = list(objectives)
    final = run.final_ensemble
    gF = np.stack([obj.final_vec(final) for obj in objectives])
    g0 = run_adjoint(AdjointEnsemble(gF, run.log.M), run.log).gammas
    return gradient_components(g0, run.cache, run.cfg.params, axes)


__all__ = [
    "AdjointEnsemble",
    "GradientReport",
    "adjoint_dsmc_gradient",
    "backward_step",
    "final_condition",
    "gradient",
    "gradient_components",
    "run_adjoint",
]
