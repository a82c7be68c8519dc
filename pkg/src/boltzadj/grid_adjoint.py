"""Eulerian discretization of the continuous adjoint equation on a velocity grid.

The density at each time level comes from a histogram of the forward
particles; the adjoint is marched backward with explicit Euler steps.  The
collision gain term is the expensive part: for node pair (a, b) and direction
sigma the post-collision point in index coordinates is
``(a + b)/2 + |a - b|/2 * sigma``, so the angular sum depends only on the
centre ``s = a + b`` and on ``D = |a - b|^2``.  The kernel loops over centres
and caches the angular sum per ``D``.
"""
from __future__ import annotations

import io
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numba
import numpy as np
from numba import njit, prange

from .core import PARAM_NAMES, InitialConditionParams, axis_index

SNAPSHOT_HEADER = struct.Struct("<Qdd")

# the bundled TBB is too old for numba and only produces a warning; skip it
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"


@dataclass(frozen=True)
class VelocityGrid:
    n: int
    v_th: float

    def __post_init__(self):
        if self.n < 8:
            raise ValueError(f"grid needs at least 8 nodes per axis, got {self.n}")
        if not self.v_th > 0:
            raise ValueError("thermal velocity must be positive")

    @classmethod
    def for_params(cls, n: int, params: InitialConditionParams) -> "VelocityGrid":
        return cls(n, math.sqrt(params.equilibrium_temperature))

    @property
    def half_width(self) -> float:
        return 5.0 * self.v_th

    @property
    def dv(self) -> float:
        return 10.0 * self.v_th / (self.n - 1)

    @property
    def cell_volume(self) -> float:
        return self.dv**3

    @property
    def coords(self) -> np.ndarray:
        return -self.half_width + self.dv * np.arange(self.n)

    def nodes(self) -> np.ndarray:
        """All node velocities, shape (n, n, n, 3) indexed [ix, iy, iz]."""
        c = self.coords
        return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)

    def to_index(self, v: np.ndarray) -> np.ndarray:
        return (np.asarray(v) + self.half_width) / self.dv


@dataclass(frozen=True)
class AngularQuadrature:
    n_phi: int = 10
    n_theta: int = 10

    def __post_init__(self):
        if self.n_phi < 1 or self.n_theta < 1:
            raise ValueError("quadrature needs at least one node per angle")

    @property
    def weight(self) -> float:
        return 4.0 * math.pi / (self.n_phi * self.n_theta)

    @property
    def nodes(self) -> np.ndarray:
        phi = -math.pi + 2.0 * math.pi * np.arange(self.n_phi) / self.n_phi
        cos_t = -1.0 + 1.0 / self.n_theta + 2.0 * np.arange(self.n_theta) / self.n_theta
        P, C = np.meshgrid(phi, cos_t, indexing="ij")
        S = np.sqrt(1.0 - C**2)
        out = np.stack([S * np.cos(P), S * np.sin(P), C], axis=-1).reshape(-1, 3)
        return np.ascontiguousarray(out)


@dataclass
class GridField:
    grid: VelocityGrid
    values: np.ndarray
    kind: str = "gamma"
    t: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        n = self.grid.n
        if v.shape[:3] != (n, n, n):
            raise ValueError(f"field shape {v.shape} does not match grid n={n}")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite grid value")
        if self.kind == "density" and np.any(v < 0):
            raise ValueError("density must be nonnegative")
        self.values = v

    def mass(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)


def histogram_counts(V: np.ndarray, grid: VelocityGrid) -> tuple[np.ndarray, int]:
    """Counts in cells centred on nodes, and the number of particles outside the grid."""
    idx = np.floor(grid.to_index(V) + 0.5).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < grid.n), axis=1)
    idx = idx[inside]
    flat = (idx[:, 0] * grid.n + idx[:, 1]) * grid.n + idx[:, 2]
    counts = np.bincount(flat, minlength=grid.n**3).reshape(grid.n, grid.n, grid.n)
    return counts, int(len(V) - inside.sum())


def histogram_density(ens, grid: VelocityGrid, renormalize: bool = False, t: float = 0.0):
    """Histogram density estimate; returns (field, dropped particle count)."""
    V = getattr(ens, "velocities", ens)
    counts, dropped = histogram_counts(np.asarray(V), grid)
    f = counts / (len(V) * grid.cell_volume)
    if renormalize:
        mass = f.sum() * grid.cell_volume
        if mass > 0:
            f = f / mass
    return GridField(grid, f, "density", t), dropped


def maxwellian_density(grid: VelocityGrid, params: InitialConditionParams) -> np.ndarray:
    """Anisotropic Gaussian initial density evaluated at the nodes."""
    c = grid.coords
    parts = [np.exp(-c**2 / (2.0 * T)) / math.sqrt(2.0 * math.pi * T) for T in params.as_array()]
    return parts[0][:, None, None] * parts[1][None, :, None] * parts[2][None, None, :]


@njit(cache=True)
def _angular_sum(g, cx, cy, cz, r, sig, n, out):
    K = g.shape[3]
    for m in range(K):
        out[m] = 0.0
    hi = n - 1.0
    for q in range(sig.shape[0]):
        px = min(max(cx + r * sig[q, 0], 0.0), hi)
        py = min(max(cy + r * sig[q, 1], 0.0), hi)
        pz = min(max(cz + r * sig[q, 2], 0.0), hi)
        ix = min(int(px), n - 2)
        iy = min(int(py), n - 2)
        iz = min(int(pz), n - 2)
        tx = px - ix
        ty = py - iy
        tz = pz - iz
        w000 = (1 - tx) * (1 - ty) * (1 - tz)
        w100 = tx * (1 - ty) * (1 - tz)
        w010 = (1 - tx) * ty * (1 - tz)
        w110 = tx * ty * (1 - tz)
        w001 = (1 - tx) * (1 - ty) * tz
        w101 = tx * (1 - ty) * tz
        w011 = (1 - tx) * ty * tz
        w111 = tx * ty * tz
        for m in range(K):
            out[m] += (
                w000 * g[ix, iy, iz, m]
                + w100 * g[ix + 1, iy, iz, m]
                + w010 * g[ix, iy + 1, iz, m]
                + w110 * g[ix + 1, iy + 1, iz, m]
                + w001 * g[ix, iy, iz + 1, m]
                + w101 * g[ix + 1, iy, iz + 1, m]
                + w011 * g[ix, iy + 1, iz + 1, m]
                + w111 * g[ix + 1, iy + 1, iz + 1, m]
            )


@njit(cache=True, parallel=True)
def _gain_kernel(g, f, sig, buf):
    """buf[sx, a, m] = sum over b with a + b = s (x-part sx) of f(b) * sum_sigma g(v'(a, b, sigma))."""
    n = g.shape[0]
    K = g.shape[3]
    ns = 2 * n - 1
    dmax = 3 * (n - 1) * (n - 1)
    for sx in prange(ns):
        stamp = np.full(dmax + 1, -1, dtype=np.int64)
        cache = np.zeros((dmax + 1, K))
        out = buf[sx]
        for m in range(K):
            for ax in range(n):
                for ay in range(n):
                    for az in range(n):
                        out[ax, ay, az, m] = 0.0
        lox = max(0, sx - (n - 1))
        hix = min(n - 1, sx)
        cx = 0.5 * sx
        tag = 0
        for sy in range(ns):
            loy = max(0, sy - (n - 1))
            hiy = min(n - 1, sy)
            for sz in range(ns):
                loz = max(0, sz - (n - 1))
                hiz = min(n - 1, sz)
                tag += 1
                for ax in range(lox, hix + 1):
                    bx = sx - ax
                    dx = ax - bx
                    for ay in range(loy, hiy + 1):
                        by = sy - ay
                        dy = ay - by
                        for az in range(loz, hiz + 1):
                            bz = sz - az
                            fb = f[bx, by, bz]
                            if fb == 0.0:
                                continue
                            dz = az - bz
                            D = dx * dx + dy * dy + dz * dz
                            if stamp[D] != tag:
                                _angular_sum(g, cx, 0.5 * sy, 0.5 * sz, 0.5 * math.sqrt(D), sig, n, cache[D])
                                stamp[D] = tag
                            for m in range(K):
                                out[ax, ay, az, m] += fb * cache[D, m]


@njit(cache=True)
def _reduce(buf, out):
    # fixed summation order over sx keeps parallel and serial results identical
    for sx in range(buf.shape[0]):
        out += buf[sx]


def collision_gain(gamma: np.ndarray, f: np.ndarray, quad: AngularQuadrature) -> np.ndarray:
    """``sum_b f(b) sum_sigma gamma(v'(a, b, sigma))`` for every node a; gamma is (n, n, n, K)."""
    g = np.ascontiguousarray(gamma, dtype=np.float64)
    n = g.shape[0]
    buf = np.empty((2 * n - 1,) + g.shape)
    _gain_kernel(g, np.ascontiguousarray(f, dtype=np.float64), quad.nodes, buf)
    out = np.zeros(g.shape)
    _reduce(buf, out)
    return out


def collision_gain_reference(gamma: np.ndarray, f: np.ndarray, quad: AngularQuadrature, grid: VelocityGrid):
    """Direct evaluation of the gain sum in physical coordinates (slow; for tests)."""
    nodes = grid.nodes().reshape(-1, 3)
    g = gamma.reshape(grid.n**3, -1)
    fv = f.reshape(-1)
    sig = quad.nodes
    occ = np.nonzero(fv)[0]
    out = np.zeros_like(g)
    gg = np.ascontiguousarray(gamma.reshape(grid.n, grid.n, grid.n, -1))
    for a in range(len(nodes)):
        va = nodes[a]
        vb = nodes[occ]
        mid = 0.5 * (va + vb)
        rad = 0.5 * np.linalg.norm(va - vb, axis=1)
        vp = mid[:, None, :] + rad[:, None, None] * sig[None, :, :]
        p = grid.to_index(vp).reshape(-1, 3)
        vals = trilinear_interpolate(gg, p)
        out[a] = np.einsum("b,bqm->m", fv[occ], vals.reshape(len(occ), len(sig), -1))
    return out.reshape(gamma.shape)


def trilinear_interpolate(gamma: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at index-space points p (P, 3), clamped to the box; returns (P, K)."""
    g = gamma if gamma.ndim == 4 else gamma[..., None]
    n = g.shape[0]
    q = np.clip(np.asarray(p, dtype=np.float64), 0.0, n - 1.0)
    i = np.minimum(q.astype(np.int64), n - 2)
    t = q - i
    out = 0.0
    for cx in (0, 1):
        wx = t[:, 0] if cx else 1 - t[:, 0]
        for cy in (0, 1):
            wy = t[:, 1] if cy else 1 - t[:, 1]
            for cz in (0, 1):
                wz = t[:, 2] if cz else 1 - t[:, 2]
                out = out + (wx * wy * wz)[:, None] * g[i[:, 0] + cx, i[:, 1] + cy, i[:, 2] + cz]
    return out


def backward_step_grid(
    gamma_next: np.ndarray,
    f_next: np.ndarray,
    grid: VelocityGrid,
    quad: AngularQuadrature,
    dt: float,
    mu: float = 1.0,
    rho: float = 1.0,
) -> np.ndarray:
    """One explicit backward Euler step; ``gamma_next`` is (n, n, n) or (n, n, n, K)."""
    scalar = gamma_next.ndim == 3
    g = gamma_next[..., None] if scalar else gamma_next
    f = np.asarray(f_next, dtype=np.float64)
    q = mu / (4.0 * math.pi * rho)
    dv3 = grid.cell_volume
    gain = collision_gain(g, f, quad)
    loss = np.einsum("abc,abcm->m", f, g) * dv3
    out = g + dt * (2.0 * q * quad.weight * dv3 * gain - (mu / rho) * loss - mu * g)
    return out[..., 0] if scalar else out


def final_gamma(objectives, final_V: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """Final adjoint fields ``-r`` at the nodes for each objective, shape (n, n, n, K)."""
    nodes = grid.nodes().reshape(-1, 3)
    cols = []
    for obj in objectives:
        if not obj.is_moment:
            raise ValueError(f"the grid method supports moment objectives only, got {obj.name}")
        cols.append(obj.final_scalar(final_V, at=nodes))
    return np.stack(cols, axis=-1).reshape(grid.n, grid.n, grid.n, -1)


def run_grid_adjoint(
    gamma_final: np.ndarray,
    densities: Sequence[np.ndarray],
    grid: VelocityGrid,
    quad: AngularQuadrature,
    dt: float,
    mu: float = 1.0,
    keep_all: bool = False,
):
    """March from step M to 0.  ``densities[k]`` is f at t_k (k = 0..M); step k uses f_{k+1}.

    Returns gamma at t=0, or the list of gammas for k = 0..M when ``keep_all``.
    """
    M = len(densities) - 1
    g = np.array(gamma_final, dtype=np.float64, copy=True)
    traj = [None] * (M + 1)
    traj[M] = g
    for k in range(M - 1, -1, -1):
        g = backward_step_grid(g, densities[k + 1], grid, quad, dt, mu)
        traj[k] = g
    return traj if keep_all else g


def gradient_grid(
    gamma0: np.ndarray, params: InitialConditionParams, grid: VelocityGrid, axes: Sequence = PARAM_NAMES
) -> np.ndarray:
    """``-sum gamma(v, 0) (v_p^2/T_p - 1)/(2 T_p) f_0(v) dv^3`` per axis; shape (K, len(axes))."""
    g = gamma0 if gamma0.ndim == 4 else gamma0[..., None]
    f0 = maxwellian_density(grid, params)
    c = grid.coords
    T = params.as_array()
    out = []
    for a in axes:
        p = axis_index(a)
        w1 = (c**2 / T[p] - 1.0) / (2.0 * T[p])
        shape = [1, 1, 1]
        shape[p] = grid.n
        w = f0 * w1.reshape(shape) * grid.cell_volume
        out.append(-np.einsum("abc,abcm->m", w, g))
    res = np.stack(out, axis=-1)
    return res[0] if gamma0.ndim == 3 else res


class DensityRecorder:
    """Forward-run observer that stores the renormalized histogram at every step."""

    def __init__(self, grid: VelocityGrid):
        self.grid = grid
        self.densities: list = []
        self.dropped: list = []

    def __call__(self, k: int, V: np.ndarray) -> None:
        field, dropped = histogram_density(V, self.grid, renormalize=True)
        self.densities.append(field.values)
        self.dropped.append(dropped)


def set_threads(n: Optional[int]) -> None:
    if n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def snapshot_to_bytes(field: GridField) -> bytes:
    buf = io.BytesIO()
    buf.write(SNAPSHOT_HEADER.pack(field.grid.n, field.grid.v_th, field.t))
    buf.write(np.asarray(field.values, dtype="<f8").ravel(order="F").tobytes())
    return buf.getvalue()


def snapshot_from_bytes(data: bytes, kind: str = "gamma") -> GridField:
    n, v_th, t = SNAPSHOT_HEADER.unpack_from(data, 0)
    expected = SNAPSHOT_HEADER.size + 8 * n**3
    if len(data) != expected:
        raise ValueError(f"grid snapshot has {len(data)} bytes, expected {expected}")
    vals = np.frombuffer(data, dtype="<f8", offset=SNAPSHOT_HEADER.size).reshape((n, n, n), order="F")
    return GridField(VelocityGrid(n, v_th), vals.copy(), kind, t)


def write_snapshot(field: GridField, path) -> None:
    Path(path).write_bytes(snapshot_to_bytes(field))


def read_snapshot(path, kind: str = "gamma") -> GridField:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"grid snapshot not found: {path}")
    return snapshot_from_bytes(path.read_bytes(), kind)


__all__ = [
    "AngularQuadrature",
    "DensityRecorder",
    "GridField",
    "VelocityGrid",
    "backward_step_grid",
    "collision_gain",
    "collision_gain_reference",
    "final_gamma",
    "gradient_grid",
    "histogram_density",
    "maxwellian_density",
    "read_snapshot",
    "run_grid_adjoint",
    "trilinear_interpolate",
    "write_snapshot",
]
