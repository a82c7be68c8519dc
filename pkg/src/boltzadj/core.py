"""Velocity and collision algebra shared by every solver.

Velocities are stored as ``(N, 3)`` float64 arrays; a single ``Vec3`` is a
length-3 array.  All collision helpers broadcast over leading axes so the
same code serves single pairs and whole batches of pairs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple, Sequence

import numpy as np

AXES = ("x", "y", "z")
PARAM_NAMES = ("Tx0", "Ty0", "Tz0")

# below this relative speed a pair is treated as coincident
DEGENERATE_SPEED = 1e-14


class ParameterError(ValueError):
    """Invalid initial-condition parameter (e.g. a nonpositive temperature)."""


class DegeneratePairError(ArithmeticError):
    """Raised when a relative direction is requested for coincident velocities."""


def axis_index(axis) -> int:
    """Map ``'x'|'y'|'z'`` (or ``0|1|2``, or ``'Tx0'`` style names) to 0..2."""
    if isinstance(axis, (int, np.integer)) and 0 <= int(axis) < 3:
        return int(axis)
    if isinstance(axis, str):
        key = axis.strip()
        if key in AXES:
            return AXES.index(key)
        if key in PARAM_NAMES:
            return PARAM_NAMES.index(key)
    raise ValueError(f"axis must be one of {AXES}, got {axis!r}")


@dataclass(frozen=True)
class InitialConditionParams:
    """Directional temperatures of the anisotropic Gaussian initial state."""

    Tx0: float = 0.5
    Ty0: float = 1.0
    Tz0: float = 1.0

    def __post_init__(self):
        for name in PARAM_NAMES:
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0.0):
                raise ParameterError(f"{name} must be a positive finite temperature, got {value!r}")

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "InitialConditionParams":
        if len(values) != 3:
            raise ParameterError(f"expected 3 temperatures, got {len(values)}")
        return cls(*(float(v) for v in values))

    def as_array(self) -> np.ndarray:
        return np.array([self.Tx0, self.Ty0, self.Tz0], dtype=np.float64)

    def with_value(self, axis, value: float) -> "InitialConditionParams":
        return replace(self, **{PARAM_NAMES[axis_index(axis)]: float(value)})

    @property
    def equilibrium_temperature(self) -> float:
        return float(self.as_array().mean())


@dataclass
class ParticleEnsemble:
    """N particle velocities at time index ``time_index``."""

    velocities: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        v = np.asarray(self.velocities, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"velocities must have shape (N, 3), got {v.shape}")
        if v.shape[0] < 2:
            raise ValueError("an ensemble needs at least two particles")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite velocity in ensemble")
        self.velocities = v

    @property
    def N(self) -> int:
        return self.velocities.shape[0]

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(self.velocities.copy(), self.time_index)


@dataclass(frozen=True)
class NormalDrawCache:
    """Standard-normal draws reused to rescale the initial state for any parameters."""

    draws: np.ndarray

    def __post_init__(self):
        d = np.array(self.draws, dtype=np.float64)
        if d.ndim != 2 or d.shape[1] != 3:
            raise ValueError(f"draws must have shape (N, 3), got {d.shape}")
        d.flags.writeable = False
        object.__setattr__(self, "draws", d)

    @property
    def N(self) -> int:
        return self.draws.shape[0]


class CollisionPairRecord(NamedTuple):
    i: int
    j: int
    sigma: np.ndarray
    alpha_hat: np.ndarray


@dataclass
class StepRecords:
    """All collisions of one time step, stored column-wise."""

    i: np.ndarray
    j: np.ndarray
    sigma: np.ndarray
    alpha_hat: np.ndarray

    def __post_init__(self):
        self.i = np.ascontiguousarray(self.i, dtype=np.int64)
        self.j = np.ascontiguousarray(self.j, dtype=np.int64)
        self.sigma = np.ascontiguousarray(self.sigma, dtype=np.float64).reshape(-1, 3)
        self.alpha_hat = np.ascontiguousarray(self.alpha_hat, dtype=np.float64).reshape(-1, 3)
        n = len(self.i)
        if not (len(self.j) == n and len(self.sigma) == n and len(self.alpha_hat) == n):
            raise ValueError("inconsistent column lengths in step records")

    def __len__(self) -> int:
        return len(self.i)

    def __iter__(self) -> Iterator[CollisionPairRecord]:
        for n in range(len(self)):
            yield CollisionPairRecord(int(self.i[n]), int(self.j[n]), self.sigma[n], self.alpha_hat[n])

    @classmethod
    def empty(cls) -> "StepRecords":
        return cls(np.empty(0, np.int64), np.empty(0, np.int64), np.empty((0, 3)), np.empty((0, 3)))

    @classmethod
    def from_records(cls, records: Sequence[CollisionPairRecord]) -> "StepRecords":
        if not records:
            return cls.empty()
        return cls(
            np.array([r.i for r in records]),
            np.array([r.j for r in records]),
            np.array([r.sigma for r in records]),
            np.array([r.alpha_hat for r in records]),
        )

    def check_indices(self, N: int) -> None:
        idx = np.concatenate([self.i, self.j])
        if idx.size and (idx.min() < 0 or idx.max() >= N):
            raise IndexError(f"collision record index out of range for N={N}")


@dataclass
class CollisionLog:
    """Per-step collision records of one forward run."""

    steps: list = field(default_factory=list)
    dt: float = 0.1
    mu: float = 1.0
    N: int = 0

    @property
    def M(self) -> int:
        return len(self.steps)

    @property
    def T(self) -> float:
        return self.M * self.dt


@dataclass(frozen=True)
class SimConfig:
    """Run parameters; ``mu`` is rho times the integral of the kernel over the sphere."""

    N: int = 100_000
    dt: float = 0.1
    T: float = 2.0
    mu: float = 1.0
    seed: int = 0
    params: InitialConditionParams = field(default_factory=InitialConditionParams)

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise ValueError(f"N must be an integer >= 2, got {self.N!r}")
        if not (self.dt > 0 and self.mu > 0):
            raise ValueError("dt and mu must be positive")
        if not self.dt * self.mu < 1.0:
            raise ValueError(f"dt*mu = {self.dt * self.mu} must be < 1")
        if self.T < 0:
            raise ValueError("T must be nonnegative")
        m = round(self.T / self.dt)
        if abs(m * self.dt - self.T) > 1e-9 * max(1.0, self.T):
            raise ValueError(f"T/dt = {self.T / self.dt} is not an integer")

    @property
    def q_const(self) -> float:
        """Isotropic kernel value for unit density."""
        return self.mu / (4.0 * math.pi)

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def n_collide(self) -> int:
        return collision_count(self.N, self.dt, self.mu)

    def with_params(self, params: InitialConditionParams) -> "SimConfig":
        return replace(self, params=params)

    def with_seed(self, seed: int) -> "SimConfig":
        return replace(self, seed=int(seed))


def collision_count(N: int, dt: float, mu: float) -> int:
    """ceil(N dt mu), bumped to the next even number and capped at N."""
    x = N * dt * mu
    # guard ceil against representation error, e.g. 10 * 0.1 * 3 = 3.0000000000000004
    nc = math.ceil(x - 1e-9 * max(1.0, x))
    nc += nc % 2
    return min(nc, N - N % 2)


class RandomStreams:
    """Three independent Philox streams derived from one seed.

    Stream order is fixed: ``init`` (initial normal draws), ``pairs`` (one
    index sample per step), ``sigma`` (one batch of collision directions per
    step).  Because the streams never depend on velocities or parameters,
    re-running with the same seed at different parameters reuses the same
    random numbers (common random numbers).
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        init_ss, pair_ss, sigma_ss = np.random.SeedSequence(self.seed).spawn(3)
        self.init = np.random.Generator(np.random.Philox(init_ss))
        self.pairs = np.random.Generator(np.random.Philox(pair_ss))
        self.sigma = np.random.Generator(np.random.Philox(sigma_ss))


def sample_unit_sphere(rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Uniform directions on the unit sphere from two uniforms each."""
    n = 1 if size is None else int(size)
    u = rng.random((n, 2))
    z = 2.0 * u[:, 0] - 1.0
    phi = 2.0 * math.pi * u[:, 1]
    s = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    out = np.column_stack((s * np.cos(phi), s * np.sin(phi), z))
    return out[0] if size is None else out


def sample_normal_cache(N: int, seed: int) -> NormalDrawCache:
    if N < 2:
        raise ValueError("N must be >= 2")
    return NormalDrawCache(RandomStreams(seed).init.standard_normal((N, 3)))


def scale_cache(cache: NormalDrawCache, params: InitialConditionParams) -> ParticleEnsemble:
    return ParticleEnsemble(cache.draws * np.sqrt(params.as_array()), 0)


def sample_initial_ensemble(params: InitialConditionParams, N: int, seed: int):
    """Initial ensemble ``sqrt(T) * z`` per axis, and the normal draws ``z``."""
    if not isinstance(params, InitialConditionParams):
        params = InitialConditionParams.from_sequence(params)
    cache = sample_normal_cache(N, seed)
    return scale_cache(cache, params), cache


def initial_sensitivity(cache: NormalDrawCache, params: InitialConditionParams, axis) -> np.ndarray:
    """d v_0 / d T_p^0 for every particle: ``v^p / (2 T_p)`` in component p, zero elsewhere."""
    p = axis_index(axis)
    T = params.as_array()[p]
    out = np.zeros_like(cache.draws)
    out[:, p] = cache.draws[:, p] * math.sqrt(T) / (2.0 * T)
    return out


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...i->...", a, b)


def collide_pair(v, v1, sigma):
    """Post-collision velocities for a Maxwell-molecule binary collision."""
    v = np.asarray(v, dtype=np.float64)
    v1 = np.asarray(v1, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    mean = 0.5 * (v + v1)
    rel = v - v1
    half = 0.5 * np.sqrt(_dot(rel, rel))[..., None] * sigma
    return mean + half, mean - half


def relative_direction(v, v1) -> np.ndarray:
    """Unit vector along ``v - v1``; raises :class:`DegeneratePairError` for coincident velocities."""
    rel = np.asarray(v, dtype=np.float64) - np.asarray(v1, dtype=np.float64)
    g = np.sqrt(_dot(rel, rel))
    if np.any(g < DEGENERATE_SPEED):
        raise DegeneratePairError("relative velocity below 1e-14")
    return rel / g[..., None]


def apply_A(sigma, alpha_hat, a, b):
    """Forward collision operator: (a, b) -> 1/2 ((a+b) +- sigma (alpha_hat . (a-b)))."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mean = 0.5 * (a + b)
    half = 0.5 * _dot(np.asarray(alpha_hat), a - b)[..., None] * np.asarray(sigma)
    return mean + half, mean - half


def apply_B(sigma, alpha_hat, a, b):
    """Transpose of :func:`apply_A`: the roles of sigma and alpha_hat swap."""
    return apply_A(alpha_hat, sigma, a, b)


def collision_matrix(sigma, alpha_hat) -> np.ndarray:
    """Dense 6x6 matrix of :func:`apply_A` (for checks, not for solving)."""
    P = np.outer(sigma, alpha_hat)
    I = np.eye(3)
    return 0.5 * np.block([[I + P, I - P], [I - P, I + P]])
