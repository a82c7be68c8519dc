"""Projected steepest descent with Armijo backtracking over DSMC objectives."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .adjoint import adjoint_dsmc_gradient
from .core import PARAM_NAMES, SimConfig, axis_index
from .forward import run_forward
from .validation import derived_seed

log = logging.getLogger(__name__)

SEED_MODES = ("fixed", "fresh")


class OptProblem(Protocol):
    names: Sequence[str]

    def value(self, alpha: np.ndarray, seed: int) -> float: ...

    def gradient(self, alpha: np.ndarray, seed: int) -> np.ndarray: ...


@dataclass
class FunctionProblem:
    """Deterministic problem from plain callables (seed ignored)."""

    fun: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    names: Sequence[str] = ("a",)

    def value(self, alpha, seed):
        return float(self.fun(np.asarray(alpha, dtype=np.float64)))

    def gradient(self, alpha, seed):
        return np.asarray(self.grad(np.asarray(alpha, dtype=np.float64)), dtype=np.float64)


class DSMCProblem:
    """Objective of the final-time DSMC state over a subset of initial temperatures.

    Each value is one forward run; each gradient is one adjoint sweep over the
    same run.  The last run is cached, so the gradient at an accepted trial
    point reuses the run that produced its value.
    """

    def __init__(self, cfg: SimConfig, objective, free: Sequence = ("Ty0",)):
        if not free:
            raise ValueError("need at least one free parameter")
        self.cfg = cfg
        self.objective = objective
        self.free = [axis_index(a) for a in free]
        if len(set(self.free)) != len(self.free):
            raise ValueError("free parameters must be distinct")
        self.names = [PARAM_NAMES[p] for p in self.free]
        self._cache_key = None
        self._cache_run = None
        self.n_forward = 0

    def params_for(self, alpha):
        params = self.cfg.params
        for p, a in zip(self.free, np.asarray(alpha, dtype=np.float64)):
            params = params.with_value(p, float(a))
        return params

    def _run(self, alpha, seed):
        key = (tuple(float(a) for a in alpha), int(seed))
        if key != self._cache_key:
            cfg = self.cfg.with_params(self.params_for(alpha)).with_seed(seed)
            self._cache_run = run_forward(cfg, record_history=False)
            self._cache_key = key
            self.n_forward += 1
        return self._cache_run

    def value(self, alpha, seed):
        return self.objective.evaluate(self._run(alpha, seed).final_ensemble)

    def gradient(self, alpha, seed):
        run = self._run(alpha, seed)
        return adjoint_dsmc_gradient(run, [self.objective], axes=self.names)[0]


@dataclass
class OptOptions:
    max_iters: int = 100
    c1: float = 1e-4
    beta: float = 0.5
    step0: float = 1.0
    max_backtracks: int = 30
    floor: float = 1e-4
    tol: float = 1e-3
    seed_mode: str = "fresh"
    seed: int = 0
    stall_limit: int = 3

    def __post_init__(self):
        if self.seed_mode not in SEED_MODES:
            raise ValueError(f"seed_mode must be one of {SEED_MODES}, got {self.seed_mode!r}")
        if not (0 < self.beta < 1 and 0 < self.c1 < 1):
            raise ValueError("need 0 < beta < 1 and 0 < c1 < 1")
        # -inf disables the bound (synthetic problems); a finite floor must be positive
        if not (self.floor > 0 or self.floor == -np.inf) or self.step0 <= 0:
            raise ValueError("floor must be positive or -inf, and step0 positive")
        if self.max_iters < 0 or self.max_backtracks < 0:
            raise ValueError("iteration counts must be nonnegative")


def seed_for_iteration(mode: str, base: int, n: int) -> int:
    if mode == "fixed":
        return int(base)
    if mode == "fresh":
        return derived_seed(base, n)
    raise ValueError(f"seed mode must be one of {SEED_MODES}, got {mode!r}")


@dataclass
class OptRecord:
    iter: int
    alpha: list
    J: float
    gradnorm: float
    step: float
    seed: int
    stalled: bool = False


@dataclass
class OptHistory:
    names: list
    records: list = field(default_factory=list)
    seed_mode: str = "fresh"
    converged: bool = False

    @property
    def alphas(self) -> np.ndarray:
        return np.array([r.alpha for r in self.records])

    @property
    def J(self) -> np.ndarray:
        return np.array([r.J for r in self.records])

    @property
    def gradnorms(self) -> np.ndarray:
        return np.array([r.gradnorm for r in self.records])

    @property
    def final_alpha(self) -> np.ndarray:
        return np.asarray(self.records[-1].alpha)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", *self.names, "J", "gradnorm", "step"])
        for r in self.records:
            w.writerow([r.iter, *(repr(float(a)) for a in r.alpha), repr(r.J), repr(r.gradnorm), repr(r.step)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {
                "names": list(self.names),
                "seed_mode": self.seed_mode,
                "converged": self.converged,
                "iterations": len(self.records) - 1,
                "final_alpha": [float(a) for a in self.final_alpha],
                "final_J": float(self.records[-1].J),
                "records": [asdict(r) for r in self.records],
            },
            indent=2,
        )


def steepest_descent(problem: OptProblem, alpha0, options: OptOptions = OptOptions()) -> OptHistory:
    """Projected steepest descent; a step is accepted if it gives sufficient decrease.

    For a trial ``a_t = max(a - s g, floor)`` the test is
    ``J(a_t) <= J(a) - c1 g.(a - a_t)``, which reduces to the usual
    ``c1 s |g|^2`` when no bound is active.  All evaluations inside one
    iteration share that iteration's seed.
    """
    alpha = np.maximum(np.asarray(alpha0, dtype=np.float64), options.floor)
    if np.any(np.asarray(alpha0) < options.floor):
        raise ValueError(f"alpha0 must be >= floor {options.floor}")
    hist = OptHistory(list(problem.names), seed_mode=options.seed_mode)
    seed = seed_for_iteration(options.seed_mode, options.seed, 0)
    J = problem.value(alpha, seed)
    g = problem.gradient(alpha, seed)
    g0 = float(np.linalg.norm(g))
    hist.records.append(OptRecord(0, alpha.tolist(), J, g0, 0.0, seed))
    step0 = options.step0
    stalls = 0
    for it in range(1, options.max_iters + 1):
        if np.linalg.norm(g) <= options.tol * g0:
            hist.converged = True
            break
        s = step0
        accepted = False
        for _ in range(options.max_backtracks + 1):
            trial = np.maximum(alpha - s * g, options.floor)
            if np.array_equal(trial, alpha):
                break
            Jt = problem.value(trial, seed)
            if Jt <= J - options.c1 * float(g @ (alpha - trial)):
                accepted = True
                break
            s *= options.beta
        if accepted:
            alpha = trial
            stalls = 0
        else:
            s = 0.0
            stalls += 1
            if options.seed_mode == "fresh" and stalls >= options.stall_limit:
                step0 *= 0.5
                stalls = 0
        seed = seed_for_iteration(options.seed_mode, options.seed, it)
        J = problem.value(alpha, seed)
        g = problem.gradient(alpha, seed)
        hist.records.append(OptRecord(it, alpha.tolist(), J, float(np.linalg.norm(g)), s, seed, not accepted))
        log.info("iter %d alpha=%s J=%.6g |g|=%.3g step=%.3g", it, alpha, J, hist.records[-1].gradnorm, s)
        if not accepted and options.seed_mode == "fixed":
            # a deterministic surface would repeat the same failed search
            break
    if np.linalg.norm(g) <= options.tol * g0:
        hist.converged = True
    return hist


__all__ = [
    "DSMCProblem",
    "FunctionProblem",
    "OptHistory",
    "OptOptions",
    "OptRecord",
    "SEED_MODES",
    "seed_for_iteration",
    "steepest_descent",
]
