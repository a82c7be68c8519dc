"""Finite-difference oracle, discrete-adjoint identities and diagnostic suites."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .adjoint import AdjointEnsemble, adjoint_dsmc_gradient, run_adjoint
from .core import SimConfig, apply_A, axis_index
from .forward import all_moments, replay_forward, run_forward

log = logging.getLogger(__name__)

# ratio below which a third-derivative estimate is treated as zero
_FLAT_THIRD = 1e-300


def mean_and_error(samples) -> tuple[float, float]:
    """Sample mean and the two-standard-error radius ``2 s / sqrt(M)``."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("need at least two samples for an error estimate")
    return float(x.mean()), float(2.0 * x.std(ddof=1) / math.sqrt(x.size))


def derived_seed(base: int, *keys: int) -> int:
    """Independent 63-bit seed for run ``keys`` of a study based at ``base``."""
    state = np.random.SeedSequence([int(base), *map(int, keys)]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def third_derivative_stencil(j_m2, j_m1, j_p1, j_p2, h: float) -> float:
    return (-j_m2 + 2.0 * j_m1 - 2.0 * j_p1 + j_p2) / (2.0 * h**3)


def fd_error_estimates(j_m2, j_m1, j_p1, j_p2, h: float, delta: float, e_rand_J: float):
    """(e_FD, e_rand, optimal step) from a four-point stencil with spacing ``h``."""
    j3 = third_derivative_stencil(j_m2, j_m1, j_p1, j_p2, h)
    e_fd = abs(j3) * delta**2 / 6.0
    e_rand = abs(e_rand_J) / delta
    if abs(j3) <= _FLAT_THIRD:
        opt = math.inf
    else:
        opt = (3.0 * abs(e_rand_J) / abs(j3)) ** (1.0 / 3.0)
    return e_fd, e_rand, opt


@dataclass
class FDGradientReport:
    objective: str
    axis: str
    value: float
    value_error: float
    delta: float
    e_fd: float
    e_rand: float
    delta_opt: float
    crn: bool
    n_samples: int
    J0: float
    J0_error: float

    def to_dict(self) -> dict:
        return asdict(self)


def _evaluate_all(cfg: SimConfig, objectives) -> np.ndarray:
    run = run_forward(cfg, record_history=False)
    return np.array([obj.evaluate(run.final_ensemble) for obj in objectives])


def fd_gradient(
    cfg: SimConfig,
    objectives,
    axis,
    delta: float,
    n_samples: int,
    crn: bool = True,
    stencil_step: Optional[float] = None,
) -> list[FDGradientReport]:
    """Central-difference gradients of several objectives with the error decomposition.

    Sample s uses base seed ``cfg.seed + s``.  With ``crn`` every stencil point
    of a sample reuses that seed, so all random streams are shared; without it
    each point draws an independent derived seed.  ``stencil_step`` (default
    ``delta / 2``) sets the spacing of the third-derivative stencil.
    """
    single = not isinstance(objectives, (list, tuple))
    objectives = [objectives] if single else list(objectives)
    p = axis_index(axis)
    base = cfg.params
    alpha0 = base.as_array()[p]
    h = delta / 2.0 if stencil_step is None else float(stencil_step)
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    if delta >= alpha0 or 2.0 * h >= alpha0:
        raise ValueError(f"stencil leaves the positive orthant: alpha={alpha0}, delta={delta}, step={h}")

    offsets = sorted({0.0, -delta, delta, -h, h, -2.0 * h, 2.0 * h})
    J = {o: np.empty((n_samples, len(objectives))) for o in offsets}
    for s in range(n_samples):
        for n, o in enumerate(offsets):
            seed = cfg.seed + s if crn else derived_seed(cfg.seed + s, n)
            run_cfg = cfg.with_params(base.with_value(p, alpha0 + o)).with_seed(seed)
            J[o][s] = _evaluate_all(run_cfg, objectives)
        log.info("fd sample %d/%d done", s + 1, n_samples)

    reports = []
    for m, obj in enumerate(objectives):
        grads = (J[delta][:, m] - J[-delta][:, m]) / (2.0 * delta)
        g, g_err = mean_and_error(grads)
        j0, j0_err = mean_and_error(J[0.0][:, m])
        means = {o: J[o][:, m].mean() for o in offsets}
        e_fd, e_rand, opt = fd_error_estimates(means[-2 * h], means[-h], means[h], means[2 * h], h, delta, j0_err)
        reports.append(
            FDGradientReport(obj.name, f"T{'xyz'[p]}0", g, g_err, delta, e_fd, e_rand, opt, crn, n_samples, j0, j0_err)
        )
    return reports[0] if single else reports


@dataclass
class FrozenLogResult:
    index: int
    adjoint: float
    replay: float
    rel_error: float


def frozen_log_check(run, obj, indices: Sequence[int], eps: float = 1e-5, rng=None) -> list[FrozenLogResult]:
    """Compare the adjoint prediction with a replayed central difference.

    Each listed particle's initial velocity is perturbed by ``eps * e`` with a
    random unit vector ``e``; the forward pass is replayed with the logged pairs
    and directions.  The relative error is normalized by ``|gamma_0i| / N``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    rng = np.random.default_rng(0) if rng is None else rng
    V0 = run.initial_ensemble.velocities
    N = len(V0)
    g0 = run_adjoint(AdjointEnsemble(obj.final_vec(run.final_ensemble), run.log.M), run.log).gammas
    out = []
    for i in indices:
        e = rng.standard_normal(3)
        e /= np.linalg.norm(e)
        Vp = V0.copy()
        Vp[i] += eps * e
        Vm = V0.copy()
        Vm[i] -= eps * e
        fd = (obj.evaluate(replay_forward(Vp, run.log)) - obj.evaluate(replay_forward(Vm, run.log))) / (2.0 * eps)
        adj = -float(g0[i] @ e) / N
        scale = max(float(np.linalg.norm(g0[i])) / N, 1e-300)
        out.append(FrozenLogResult(int(i), adj, fd, abs(fd - adj) / scale))
    return out


def linearized_forward(dV0: np.ndarray, log_) -> np.ndarray:
    """Push a velocity perturbation through the logged collision operators."""
    d = np.array(dV0, dtype=np.float64, copy=True)
    for rec in log_.steps:
        if len(rec):
            a, b = apply_A(rec.sigma, rec.alpha_hat, d[rec.i], d[rec.j])
            d[rec.i] = a
            d[rec.j] = b
    return d


def duality_check(log_, N: int, seed: int = 0) -> tuple[float, float, float]:
    """(<Gamma_0, dV_0>, <Gamma_F, dV_F>, relative difference) for random fields."""
    rng = np.random.default_rng(seed)
    dV0 = rng.standard_normal((N, 3))
    gF = rng.standard_normal((N, 3))
    dVF = linearized_forward(dV0, log_)
    g0 = run_adjoint(AdjointEnsemble(gF, log_.M), log_).gammas
    lhs = float(np.sum(g0 * dV0))
    rhs = float(np.sum(gF * dVF))
    return lhs, rhs, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)


def conservation_drift(history: np.ndarray) -> tuple[float, float]:
    """Max momentum drift (relative to the rms speed) and max relative energy drift."""
    p = history[:, 0:3]
    E = history[:, 3:6].sum(axis=1)
    scale = math.sqrt(E[0])
    mom = float(np.max(np.abs(p - p[0])) / scale)
    en = float(np.max(np.abs(E - E[0])) / E[0])
    return mom, en


@dataclass
class BridgeResult:
    table: np.ndarray
    n_bins: int
    max_abs_z: float
    frac_within_3: float
    max_abs_diff: float

    COLUMNS = ("ix", "iy", "iz", "count", "gx", "gy", "gz", "dx", "dy", "dz", "zx", "zy", "zz")


def grid_gradient_field(gamma: np.ndarray, dv: float) -> np.ndarray:
    """Central-difference gradient of a nodal field, shape (n, n, n, 3)."""
    return np.stack(np.gradient(gamma, dv, edge_order=2), axis=-1)


def bridge_check(V: np.ndarray, gammas: np.ndarray, gamma_grid: np.ndarray, grid, n_min: int = 200) -> BridgeResult:
    """Per-bin paired comparison of adjoint vectors with the grid adjoint gradient.

    For each particle the difference between its adjoint vector and the grid
    gradient interpolated at its velocity is formed; bins with at least
    ``n_min`` particles report the mean difference and its z-score per
    component.
    """
    from .grid_adjoint import histogram_counts, trilinear_interpolate

    grad = grid_gradient_field(gamma_grid, grid.dv)
    G = trilinear_interpolate(grad, grid.to_index(V))
    diff = gammas - G
    idx = np.floor(grid.to_index(V) + 0.5).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < grid.n), axis=1)
    flat = np.where(inside, (idx[:, 0] * grid.n + idx[:, 1]) * grid.n + idx[:, 2], -1)
    order = np.argsort(flat, kind="stable")
    fs = flat[order]
    starts = np.flatnonzero(np.r_[True, fs[1:] != fs[:-1]])
    ends = np.r_[starts[1:], len(fs)]
    rows = []
    for a, b in zip(starts, ends):
        if fs[a] < 0 or b - a < n_min:
            continue
        sel = order[a:b]
        d = diff[sel]
        cnt = b - a
        mean = d.mean(axis=0)
        se = d.std(axis=0, ddof=1) / math.sqrt(cnt)
        z = np.where(se > 0, mean / np.where(se > 0, se, 1.0), np.where(np.abs(mean) > 1e-12, np.inf, 0.0))
        node = np.unravel_index(fs[a], (grid.n,) * 3)
        rows.append([*node, cnt, *gammas[sel].mean(axis=0), *mean, *z])
    table = np.array(rows) if rows else np.empty((0, 13))
    zs = np.abs(table[:, 10:13]) if rows else np.zeros((0, 3))
    return BridgeResult(
        table,
        len(rows),
        float(zs.max()) if rows else 0.0,
        float(np.mean(zs <= 3.0)) if rows else 1.0,
        float(np.abs(table[:, 7:10]).max()) if rows else 0.0,
    )


@dataclass
class SuiteResult:
    name: str
    passed: bool
    observed: float
    expected: str
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: observed {self.observed:.6g}, expected {self.expected}"


@dataclass
class ValidateSettings:
    N: int = 1000
    seed: int = 0
    n_seeds: int = 5
    frozen_particles: int = 10
    eps: float = 1e-5
    fd_N: int = 100_000
    fd_delta: float = 1e-4
    bridge_N: int = 100_000
    bridge_n_grid: int = 12
    n_phi: int = 6
    n_theta: int = 6


def run_validation(cfg: SimConfig, settings: ValidateSettings = ValidateSettings(), objective=None) -> list[SuiteResult]:
    """Conservation, frozen-log, duality, bridge (k = M) and CRN agreement suites."""
    from .grid_adjoint import VelocityGrid, final_gamma
    from .objectives import make_objective

    obj = objective if objective is not None else make_objective("moment2", "x")
    results = []

    worst_mom = worst_en = 0.0
    for s in range(settings.n_seeds):
        run = run_forward(SimConfig(settings.N, cfg.dt, cfg.T, cfg.mu, settings.seed + s, cfg.params))
        mom, en = conservation_drift(run.moment_history)
        worst_mom, worst_en = max(worst_mom, mom), max(worst_en, en)
    results.append(SuiteResult("conservation.momentum", worst_mom < 1e-12, worst_mom, "< 1e-12"))
    results.append(SuiteResult("conservation.energy", worst_en < 1e-12, worst_en, "< 1e-12"))

    worst_fl = worst_dual = 0.0
    for s in range(settings.n_seeds):
        run = run_forward(SimConfig(settings.N, cfg.dt, cfg.T, cfg.mu, settings.seed + s, cfg.params), record_history=False)
        rng = np.random.default_rng(settings.seed + s)
        idx = rng.choice(settings.N, settings.frozen_particles, replace=False)
        checks = frozen_log_check(run, obj, idx, settings.eps, rng)
        worst_fl = max(worst_fl, max(c.rel_error for c in checks))
        worst_dual = max(worst_dual, duality_check(run.log, settings.N, settings.seed + s)[2])
    results.append(SuiteResult("frozen_log", worst_fl <= 1e-6, worst_fl, "<= 1e-6 relative"))
    results.append(SuiteResult("duality", worst_dual <= 1e-10, worst_dual, "<= 1e-10 relative"))

    bcfg = SimConfig(settings.bridge_N, cfg.dt, cfg.T, cfg.mu, settings.seed, cfg.params)
    run = run_forward(bcfg, record_history=False)
    grid = VelocityGrid.for_params(settings.bridge_n_grid, cfg.params)
    # central differences are exact on the quadratic final field, so only rounding remains
    t_obj = make_objective("moment2", "x")
    gF = final_gamma([t_obj], run.final_ensemble.velocities, grid)[..., 0]
    br = bridge_check(run.final_ensemble.velocities, t_obj.final_vec(run.final_ensemble), gF, grid, n_min=200)
    results.append(SuiteResult("bridge.final", br.max_abs_diff <= 1e-9, br.max_abs_diff, "<= 1e-9", {"bins": br.n_bins}))

    fcfg = SimConfig(settings.fd_N, cfg.dt, cfg.T, cfg.mu, settings.seed, cfg.params)
    adj = adjoint_dsmc_gradient(run_forward(fcfg, record_history=False), [obj], axes=["Tx0"])[0, 0]
    fd = crn_fd_single(fcfg, obj, settings.fd_delta)
    rel = abs(fd - adj) / max(abs(adj), 1e-300)
    results.append(SuiteResult("crn_fd_vs_adjoint", rel <= 1e-3, rel, "<= 1e-3 relative", {"adjoint": adj, "fd": fd}))
    return results


def crn_fd_single(cfg: SimConfig, obj, delta: float, axis="x") -> float:
    """One-seed CRN central difference (same seed on both sides)."""
    p = axis_index(axis)
    a0 = cfg.params.as_array()[p]
    jp = _evaluate_all(cfg.with_params(cfg.params.with_value(p, a0 + delta)), [obj])[0]
    jm = _evaluate_all(cfg.with_params(cfg.params.with_value(p, a0 - delta)), [obj])[0]
    return (jp - jm) / (2.0 * delta)


def results_json(results: Sequence[SuiteResult]) -> str:
    return json.dumps([{**asdict(r)} for r in results], indent=2, default=float)


def table_rows(names: Sequence[str], samples: np.ndarray) -> list[tuple[str, float, float]]:
    """(quantity, mean, two-standard-error) rows for samples of shape (M_s, len(names))."""
    return [(n, *mean_and_error(samples[:, i])) for i, n in enumerate(names)]


def moments_at_final(run) -> np.ndarray:
    return all_moments(run.final_ensemble.velocities)


__all__ = [
    "BridgeResult",
    "FDGradientReport",
    "FrozenLogResult",
    "SuiteResult",
    "ValidateSettings",
    "bridge_check",
    "conservation_drift",
    "crn_fd_single",
    "derived_seed",
    "duality_check",
    "fd_error_estimates",
    "fd_gradient",
    "frozen_log_check",
    "linearized_forward",
    "mean_and_error",
    "run_validation",
    "table_rows",
]
