"""Particle scheme for the continuous adjoint equation.

Scalar adjoint values ride on the forward particles.  At a collision the
missing values of the continuous adjoint at pre-collision velocities are
estimated as conditional expectations by piecewise-linear interpolation on a
Delaunay tetrahedralization of the later particle cloud.
"""
from __future__ import annotations

import logging
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree
from scipy.interpolate import LinearNDInterpolator

from .core import PARAM_NAMES, InitialConditionParams, NormalDrawCache, StepRecords, axis_index
from .forward import backward_velocity_step

log = logging.getLogger(__name__)

N_NEIGHBORS = 8


class ScalarInterpolant:
    """Linear interpolation of particle values with a nearest-neighbour fallback.

    ``values`` may be ``(N,)`` or ``(N, K)``; K fields share one triangulation.
    Queries outside the convex hull use inverse-distance weights over the
    ``k`` nearest particles.  If the cloud is degenerate (coplanar, too few
    points) every query uses the plain k-nearest average.
    """

    def __init__(self, points: np.ndarray, values: np.ndarray, k: int = N_NEIGHBORS):
        self.points = np.asarray(points, dtype=np.float64)
        vals = np.asarray(values, dtype=np.float64)
        self._scalar = vals.ndim == 1
        self.values = vals[:, None] if self._scalar else vals
        self.k = min(k, len(self.points))
        self._tree = None
        self._linear = None
        self.degenerate = False
        if len(self.points) >= 4:
            try:
                tri = Delaunay(self.points)
                self._linear = LinearNDInterpolator(tri, self.values, fill_value=np.nan)
            except QhullError:
                self.degenerate = True
        else:
            self.degenerate = True
        self.n_fallback = 0

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree

    def _knn(self, q: np.ndarray, idw: bool) -> np.ndarray:
        dist, idx = self.tree.query(q, k=self.k)
        if self.k == 1:
            dist, idx = dist[:, None], idx[:, None]
        vals = self.values[idx]
        if not idw:
            return vals.mean(axis=1)
        exact = dist[:, 0] == 0.0
        w = 1.0 / np.where(dist == 0.0, 1.0, dist)
        out = np.einsum("qk,qkm->qm", w, vals) / w.sum(axis=1)[:, None]
        out[exact] = vals[exact, 0]
        return out

    def __call__(self, query) -> np.ndarray:
        q = np.atleast_2d(np.asarray(query, dtype=np.float64))
        if self._linear is None:
            out = self._knn(q, idw=False)
            self.n_fallback += len(q)
        else:
            out = np.asarray(self._linear(q)).reshape(len(q), -1)
            bad = np.isnan(out).any(axis=1)
            if bad.any():
                out[bad] = self._knn(q[bad], idw=True)
                self.n_fallback += int(bad.sum())
        if self._scalar:
            out = out[:, 0]
        return out


def interpolate_conditional(points, values, query) -> np.ndarray:
    """Estimate E[value | v = query] from particle values on ``points``."""
    q = np.asarray(query, dtype=np.float64)
    out = ScalarInterpolant(points, values)(q)
    return out[0] if q.ndim == 1 else out


def final_condition_scalar(obj, final) -> np.ndarray:
    return obj.final_scalar(final)


InterpolateFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _default_interpolate(points, values, query):
    return ScalarInterpolant(points, values)(query)


def backward_step_particle(
    values_next: np.ndarray,
    V_k: np.ndarray,
    V_next: np.ndarray,
    rec: StepRecords,
    interpolate: Optional[InterpolateFn] = None,
) -> np.ndarray:
    """Values at step k from values at k+1 for the collisions of step k."""
    out = np.array(values_next, dtype=np.float64, copy=True)
    if not len(rec):
        return out
    interpolate = interpolate or _default_interpolate
    i, j = rec.i, rec.j
    P = len(i)
    # each partner needs the adjoint at the other one's pre-collision velocity
    query = np.concatenate([V_k[j], V_k[i]])
    E = np.asarray(interpolate(V_next, values_next, query))
    total = values_next[i] + values_next[j]
    out[i] = total - E[:P]
    out[j] = total - E[P:]
    return out


def run_particle_adjoint(
    run,
    values_final: np.ndarray,
    observer: Optional[Callable[[int, np.ndarray, np.ndarray], None]] = None,
    interpolate: Optional[InterpolateFn] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Backward sweep; velocities are reconstructed from the final state and the log.

    Returns the adjoint values and the reconstructed velocities at k = 0.
    """
    V_next = run.final_ensemble.velocities.copy()
    values = np.array(values_final, dtype=np.float64, copy=True)
    M = run.log.M
    if observer is not None:
        observer(M, V_next, values)
    for k in range(M - 1, -1, -1):
        rec = run.log.steps[k]
        V_k = V_next.copy()
        backward_velocity_step(V_k, rec)
        values = backward_step_particle(values, V_k, V_next, rec, interpolate)
        V_next = V_k
        if observer is not None:
            observer(k, V_next, values)
        log.debug("particle adjoint step %d done", k)
    return values, V_next


def gradient_particle(
    values0: np.ndarray, cache: NormalDrawCache, params: InitialConditionParams, axes: Sequence = PARAM_NAMES
) -> np.ndarray:
    """``-(1/N) sum_i gamma_i(0) (z_p^2 - 1) / (2 T_p)`` per axis, where ``z_p^2 = v_p^2 / T_p``."""
    vals = np.asarray(values0, dtype=np.float64)
    N = cache.N
    if vals.shape[0] != N:
        raise ValueError(f"adjoint has {vals.shape[0]} particles, cache has {N}")
    T = params.as_array()
    out = []
    for a in axes:
        p = axis_index(a)
        w = (cache.draws[:, p] ** 2 - 1.0) / (2.0 * T[p])
        out.append(-(w @ vals) / N)
    return np.stack(out, axis=-1)


def particle_gradient(run, objectives, axes: Sequence = PARAM_NAMES) -> np.ndarray:
    """Gradients of several objectives from one forward run; shape (K, len(axes))."""
    final = run.final_ensemble
    vals = np.column_stack([obj.final_scalar(final) for obj in objectives])
    v0, _ = run_particle_adjoint(run, vals)
    return gradient_particle(v0, run.cache, run.cfg.params, axes)


__all__ = [
    "ScalarInterpolant",
    "backward_step_particle",
    "final_condition_scalar",
    "gradient_particle",
    "interpolate_conditional",
    "particle_gradient",
    "run_particle_adjoint",
]
