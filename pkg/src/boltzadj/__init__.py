"""Adjoint DSMC gradients for the spatially homogeneous Boltzmann equation."""

from .core import (
    AXES,
    PARAM_NAMES,
    CollisionLog,
    InitialConditionParams,
    ParticleEnsemble,
    SimConfig,
    StepRecords,
)
from .forward import ForwardRunResult, run_forward
from .objectives import make_objective

__version__ = "0.1.0"

__all__ = [
    "AXES",
    "PARAM_NAMES",
    "CollisionLog",
    "ForwardRunResult",
    "InitialConditionParams",
    "ParticleEnsemble",
    "SimConfig",
    "StepRecords",
    "make_objective",
    "run_forward",
]
