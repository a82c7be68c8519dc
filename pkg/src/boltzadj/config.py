"""Run configuration files (TOML) with a strict schema."""
from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import InitialConditionParams, ParameterError, SimConfig
from .grid_adjoint import AngularQuadrature
from .objectives import make_objective
from .optimize import OptOptions
from .validation import ValidateSettings


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


_NUM = (int, float)
_LIST = (list,)

SCHEMA: dict[str, dict[str, tuple]] = {
    "simulation": {"N": (int,), "dt": _NUM, "T": _NUM, "mu": _NUM, "seed": (int,)},
    "initial_condition": {"Tx0": _NUM, "Ty0": _NUM, "Tz0": _NUM},
    "objective": {"kind": (str,), "axis": (str,), "d_obs": _LIST},
    "method": {
        "name": (str,),
        "axes": _LIST,
        "delta_alpha": _NUM,
        "crn": (bool,),
        "Ms": (int,),
        "stencil_step": _NUM,
    },
    "grid": {"n_grid": (int,), "n_phi": (int,), "n_theta": (int,)},
    "optimize": {
        "free": _LIST,
        "alpha0": _LIST,
        "max_iters": (int,),
        "c1": _NUM,
        "beta": _NUM,
        "step0": _NUM,
        "max_backtracks": (int,),
        "floor": _NUM,
        "tol": _NUM,
        "seed_policy": (str,),
    },
    "validate": {
        "N": (int,),
        "n_seeds": (int,),
        "frozen_particles": (int,),
        "eps": _NUM,
        "fd_N": (int,),
        "fd_delta": _NUM,
        "bridge_N": (int,),
        "bridge_n_grid": (int,),
    },
}

METHODS = ("adjoint_dsmc", "continuous_particle", "continuous_grid", "fd")


def _check_type(block: str, key: str, value: Any, types: tuple) -> None:
    # bool is an int subclass; only accept it where bool is declared
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"[{block}] {key}: expected {types[0].__name__}, got bool")
    if not isinstance(value, types):
        raise ConfigError(f"[{block}] {key}: expected {types[0].__name__}, got {type(value).__name__}")


def validate_schema(data: dict) -> None:
    for block, body in data.items():
        if block not in SCHEMA:
            raise ConfigError(f"unknown section [{block}]; allowed: {', '.join(SCHEMA)}")
        if not isinstance(body, dict):
            raise ConfigError(f"[{block}] must be a table")
        for key, value in body.items():
            if key not in SCHEMA[block]:
                raise ConfigError(f"unknown key '{key}' in [{block}]; allowed: {', '.join(SCHEMA[block])}")
            _check_type(block, key, value, SCHEMA[block][key])


@dataclass
class RunConfig:
    raw: dict = field(default_factory=dict)

    def section(self, name: str) -> dict:
        return dict(self.raw.get(name, {}))

    def sim_config(self, seed: Optional[int] = None) -> SimConfig:
        s = self.section("simulation")
        ic = self.section("initial_condition")
        try:
            params = InitialConditionParams(
                float(ic.get("Tx0", 0.5)), float(ic.get("Ty0", 1.0)), float(ic.get("Tz0", 1.0))
            )
            return SimConfig(
                N=int(s.get("N", 100_000)),
                dt=float(s.get("dt", 0.1)),
                T=float(s.get("T", 2.0)),
                mu=float(s.get("mu", 1.0)),
                seed=int(seed if seed is not None else s.get("seed", 0)),
                params=params,
            )
        except (ParameterError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def objective(self):
        o = self.section("objective")
        try:
            return make_objective(o.get("kind", "moment2"), o.get("axis", "x"), o.get("d_obs"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def method(self) -> dict:
        m = self.section("method")
        m.setdefault("name", "adjoint_dsmc")
        if m["name"] not in METHODS:
            raise ConfigError(f"[method] name must be one of {METHODS}, got {m['name']!r}")
        m.setdefault("axes", ["Tx0", "Ty0", "Tz0"])
        m.setdefault("delta_alpha", 0.1)
        m.setdefault("crn", True)
        m.setdefault("Ms", 10)
        return m

    def grid(self) -> tuple[int, AngularQuadrature]:
        g = self.section("grid")
        n = int(g.get("n_grid", 40))
        if n < 8:
            raise ConfigError("[grid] n_grid must be >= 8")
        try:
            quad = AngularQuadrature(int(g.get("n_phi", 10)), int(g.get("n_theta", 10)))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return n, quad

    def optimize(self, seed: Optional[int] = None) -> tuple[list, list, OptOptions]:
        if "optimize" not in self.raw:
            raise ConfigError("missing [optimize] section")
        o = self.section("optimize")
        free = list(o.get("free", ["Ty0"]))
        sim = self.sim_config(seed)
        default_alpha0 = [sim.params.as_array()[["Tx0", "Ty0", "Tz0"].index(a)] for a in free if a in ("Tx0", "Ty0", "Tz0")]
        alpha0 = [float(a) for a in o.get("alpha0", default_alpha0)]
        if len(alpha0) != len(free):
            raise ConfigError("[optimize] alpha0 must have one entry per free parameter")
        try:
            opts = OptOptions(
                max_iters=int(o.get("max_iters", 100)),
                c1=float(o.get("c1", 1e-4)),
                beta=float(o.get("beta", 0.5)),
                step0=float(o.get("step0", 1.0)),
                max_backtracks=int(o.get("max_backtracks", 30)),
                floor=float(o.get("floor", 1e-4)),
                tol=float(o.get("tol", 1e-3)),
                seed_mode=str(o.get("seed_policy", "fresh")),
                seed=sim.seed,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return free, alpha0, opts

    def validate_settings(self) -> ValidateSettings:
        return ValidateSettings(**self.section("validate"))


def parse_config(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    validate_schema(data)
    cfg = RunConfig(data)
    cfg.sim_config()
    cfg.objective()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


__all__ = ["ConfigError", "METHODS", "RunConfig", "SCHEMA", "load_config", "parse_config"]
