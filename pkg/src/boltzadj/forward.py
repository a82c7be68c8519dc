"""Nanbu-Babovsky time stepping for Maxwell molecules, with collision logging."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .core import (
    AXES,
    DEGENERATE_SPEED,
    CollisionLog,
    NormalDrawCache,
    ParticleEnsemble,
    RandomStreams,
    SimConfig,
    StepRecords,
    apply_B,
    collision_count,
    sample_unit_sphere,
    scale_cache,
)

MOMENT_KINDS = ("p", "T", "m4")
MOMENT_COLUMNS = ("px", "py", "pz", "Tx", "Ty", "Tz", "m4x", "m4y", "m4z")
LOG_MAGIC = b"BADJ1"
LOG_HEADER = struct.Struct("<5sQQdd")
PAIR_DTYPE = np.dtype([("i", "<u4"), ("j", "<u4"), ("sigma", "<f8", (3,)), ("alpha_hat", "<f8", (3,))])


@dataclass
class ForwardRunResult:
    final_ensemble: ParticleEnsemble
    log: CollisionLog
    moment_history: Optional[np.ndarray]
    cache: NormalDrawCache
    cfg: SimConfig

    @property
    def initial_ensemble(self) -> ParticleEnsemble:
        return scale_cache(self.cache, self.cfg.params)


def n_collisions(N: int, dt: float, mu: float = 1.0) -> int:
    return collision_count(N, dt, mu)


def moment(ens, kind: str, axis) -> float:
    """Per-axis moment: ``p`` (mean), ``T`` (second) or ``m4`` (fourth)."""
    from .core import axis_index

    v = ens.velocities if isinstance(ens, ParticleEnsemble) else np.asarray(ens)
    x = v[:, axis_index(axis)]
    if kind == "p":
        return float(x.mean())
    if kind == "T":
        return float(np.dot(x, x) / len(x))
    if kind == "m4":
        x2 = x * x
        return float(np.dot(x2, x2) / len(x))
    raise ValueError(f"moment kind must be one of {MOMENT_KINDS}, got {kind!r}")


def all_moments(v: np.ndarray) -> np.ndarray:
    """(px, py, pz, Tx, Ty, Tz, m4x, m4y, m4z) of a velocity array."""
    v2 = v * v
    return np.concatenate([v.mean(axis=0), v2.mean(axis=0), (v2 * v2).mean(axis=0)])


def collide_indexed(V: np.ndarray, i: np.ndarray, j: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Collide pairs (i, j) of ``V`` in place; returns the pre-collision relative directions."""
    v = V[i]
    v1 = V[j]
    rel = v - v1
    g = np.sqrt(np.einsum("ij,ij->i", rel, rel))
    degenerate = g < DEGENERATE_SPEED
    safe = np.where(degenerate, 1.0, g)
    alpha_hat = rel / safe[:, None]
    if degenerate.any():
        alpha_hat[degenerate] = sigma[degenerate]
    mean = 0.5 * (v + v1)
    half = (0.5 * g)[:, None] * sigma
    V[i] = mean + half
    V[j] = mean - half
    return alpha_hat


def step(ens: ParticleEnsemble, cfg: SimConfig, rng: RandomStreams):
    """Advance one time step; returns the new ensemble and this step's collision records."""
    V = ens.velocities.copy()
    records = _step_inplace(V, cfg, rng)
    return ParticleEnsemble(V, ens.time_index + 1), records


def _step_inplace(V: np.ndarray, cfg: SimConfig, rng: RandomStreams) -> StepRecords:
    N = V.shape[0]
    nc = collision_count(N, cfg.dt, cfg.mu)
    if nc == 0:
        return StepRecords.empty()
    # choice without replacement is distributed as the head of a uniform permutation
    idx = rng.pairs.choice(N, nc, replace=False)
    i = idx[0::2]
    j = idx[1::2]
    sigma = sample_unit_sphere(rng.sigma, nc // 2)
    alpha_hat = collide_indexed(V, i, j, sigma)
    return StepRecords(i, j, sigma, alpha_hat)


def run_forward(
    cfg: SimConfig,
    record_history: bool = True,
    observer: Optional[Callable[[int, np.ndarray], None]] = None,
    cache: Optional[NormalDrawCache] = None,
) -> ForwardRunResult:
    """Run M = T/dt steps from the sampled initial state.

    ``observer(k, V)`` is called for k = 0..M with a read-only view of the
    velocities; it must not keep the array.  A precomputed ``cache`` must come
    from the same seed for the run to match a fresh one.
    """
    rng = RandomStreams(cfg.seed)
    if cache is None:
        cache = NormalDrawCache(rng.init.standard_normal((cfg.N, 3)))
    elif cache.N != cfg.N:
        raise ValueError("normal-draw cache size does not match N")
    V = scale_cache(cache, cfg.params).velocities.copy()
    M = cfg.n_steps
    history = np.empty((M + 1, 9)) if record_history else None
    log = CollisionLog(steps=[], dt=cfg.dt, mu=cfg.mu, N=cfg.N)

    def _observe(k):
        if history is not None:
            history[k] = all_moments(V)
        if observer is not None:
            view = V.view()
            view.flags.writeable = False
            observer(k, view)

    _observe(0)
    for k in range(M):
        log.steps.append(_step_inplace(V, cfg, rng))
        _observe(k + 1)
    return ForwardRunResult(ParticleEnsemble(V, M), log, history, cache, cfg)


def replay_forward(v0: np.ndarray, log: CollisionLog) -> np.ndarray:
    """Re-run the logged pairs and directions from new initial velocities.

    Relative directions are recomputed from the replayed velocities, so this is
    the exact forward map whose derivative the discrete adjoint represents.
    """
    V = np.array(v0, dtype=np.float64, copy=True)
    for rec in log.steps:
        if len(rec):
            collide_indexed(V, rec.i, rec.j, rec.sigma)
    return V


def backward_velocity_step(V: np.ndarray, rec: StepRecords) -> None:
    """Undo one logged step in place using the recorded relative directions."""
    if len(rec):
        a, b = apply_B(rec.sigma, rec.alpha_hat, V[rec.i], V[rec.j])
        V[rec.i] = a
        V[rec.j] = b


def reconstruct_velocities_backward(final: ParticleEnsemble, log: CollisionLog, k: int) -> ParticleEnsemble:
    M = log.M
    if not 0 <= k <= M:
        raise ValueError(f"step index {k} outside 0..{M}")
    V = final.velocities.copy()
    for n in range(M - 1, k - 1, -1):
        backward_velocity_step(V, log.steps[n])
    return ParticleEnsemble(V, k)


def write_log(log: CollisionLog, path) -> None:
    with open(path, "wb") as fh:
        fh.write(log_to_bytes(log))


def log_to_bytes(log: CollisionLog) -> bytes:
    buf = io.BytesIO()
    buf.write(LOG_HEADER.pack(LOG_MAGIC, log.N, log.M, log.dt, log.mu))
    for rec in log.steps:
        arr = np.empty(len(rec), dtype=PAIR_DTYPE)
        arr["i"] = rec.i
        arr["j"] = rec.j
        arr["sigma"] = rec.sigma
        arr["alpha_hat"] = rec.alpha_hat
        buf.write(struct.pack("<I", len(rec)))
        buf.write(arr.tobytes())
    return buf.getvalue()


def read_log(path) -> CollisionLog:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"collision log not found: {path}")
    return log_from_bytes(path.read_bytes())


def log_from_bytes(data: bytes) -> CollisionLog:
    if len(data) < LOG_HEADER.size:
        raise ValueError("collision log truncated in header")
    magic, N, M, dt, mu = LOG_HEADER.unpack_from(data, 0)
    if magic != LOG_MAGIC:
        raise ValueError(f"bad collision log magic {magic!r}")
    off = LOG_HEADER.size
    steps = []
    for _ in range(M):
        if off + 4 > len(data):
            raise ValueError("collision log truncated")
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        nbytes = count * PAIR_DTYPE.itemsize
        if off + nbytes > len(data):
            raise ValueError("collision log truncated")
        arr = np.frombuffer(data, dtype=PAIR_DTYPE, count=count, offset=off)
        off += nbytes
        steps.append(StepRecords(arr["i"], arr["j"], arr["sigma"], arr["alpha_hat"]))
    if off != len(data):
        raise ValueError("trailing bytes after collision log")
    return CollisionLog(steps=steps, dt=dt, mu=mu, N=N)


def moments_csv(history: np.ndarray, dt: float) -> str:
    lines = ["k,t," + ",".join(MOMENT_COLUMNS)]
    for k, row in enumerate(history):
        vals = ",".join(format(float(x), ".17g") for x in row)
        lines.append(f"{k},{format(k * dt, '.17g')},{vals}")
    return "\n".join(lines) + "\n"


def read_moments_csv(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 2:]


__all__ = [
    "AXES",
    "ForwardRunResult",
    "MOMENT_COLUMNS",
    "all_moments",
    "backward_velocity_step",
    "collide_indexed",
    "log_from_bytes",
    "log_to_bytes",
    "moment",
    "moments_csv",
    "n_collisions",
    "read_log",
    "read_moments_csv",
    "reconstruct_velocities_backward",
    "replay_forward",
    "run_forward",
    "step",
    "write_log",
]
