import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boltzadj.core import InitialConditionParams, SimConfig
from boltzadj.forward import run_forward
from boltzadj.grid_adjoint import VelocityGrid
from boltzadj.objectives import make_objective
from boltzadj.validation import (
    SuiteResult,
    ValidateSettings,
    bridge_check,
    conservation_drift,
    crn_fd_single,
    derived_seed,
    fd_error_estimates,
    fd_gradient,
    frozen_log_check,
    mean_and_error,
    results_json,
    run_validation,
    table_rows,
    third_derivative_stencil,
)
from boltzadj.adjoint import adjoint_dsmc_gradient


def test_mean_and_error_examples():
    assert mean_and_error([1, 1, 1, 1]) == (1.0, 0.0)
    m, e = mean_and_error([0, 2])
    assert m == 1.0 and math.isclose(e, 2.0)
    with pytest.raises(ValueError):
        mean_and_error([1.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30), st.randoms())
def test_mean_and_error_permutation_invariant(xs, rnd):
    ys = list(xs)
    rnd.shuffle(ys)
    a, b = mean_and_error(xs), mean_and_error(ys)
    assert math.isclose(a[0], b[0], rel_tol=1e-9, abs_tol=1e-9)
    assert math.isclose(a[1], b[1], rel_tol=1e-9, abs_tol=1e-9)


def test_fd_error_estimates_cubic():
    h, d = 0.05, 0.1
    J = lambda a: a**3
    a0 = 0.7
    e_fd, e_rand, opt = fd_error_estimates(J(a0 - 2 * h), J(a0 - h), J(a0 + h), J(a0 + 2 * h), h, d, 1e-4)
    assert math.isclose(e_fd, 0.01, rel_tol=1e-9)
    assert math.isclose(e_rand, 1e-3)
    assert math.isclose(opt, (3e-4 / 6) ** (1 / 3), rel_tol=1e-9)
    assert math.isclose(third_derivative_stencil(J(a0 - 2 * h), J(a0 - h), J(a0 + h), J(a0 + 2 * h), h), 6.0, rel_tol=1e-9)


def test_fd_error_estimates_flat_third_derivative():
    e_fd, _, opt = fd_error_estimates(1.0, 2.0, 4.0, 5.0, 0.1, 0.1, 1e-3)
    assert e_fd == 0.0 and math.isinf(opt)


def test_central_difference_arithmetic():
    assert math.isclose((0.77108 - 0.65661) / 0.2, 0.572350, rel_tol=1e-12)


def test_derived_seed_distinct():
    seeds = {derived_seed(7, k) for k in range(100)}
    assert len(seeds) == 100
    assert derived_seed(7, 3) == derived_seed(7, 3)


def test_fd_gradient_crn_matches_adjoint():
    cfg = SimConfig(N=10**5, seed=3)
    obj = make_objective("T", "x")
    adj = adjoint_dsmc_gradient(run_forward(cfg, record_history=False), [obj], axes=["Tx0"])[0, 0]
    fd = crn_fd_single(cfg, obj, 1e-4)
    assert abs(fd - adj) / abs(adj) <= 1e-3


def test_fd_gradient_report_and_guards():
    cfg = SimConfig(N=2000, seed=0)
    reps = fd_gradient(cfg, [make_objective("T", "x"), make_objective("m4", "y")], "x", 0.1, 3)
    assert len(reps) == 2
    for r in reps:
        assert r.e_fd >= 0 and r.e_rand >= 0 and r.crn
        assert r.n_samples == 3 and r.axis == "Tx0"
    assert abs(reps[0].value - 0.5723) < 0.1
    nc = fd_gradient(cfg, make_objective("T", "x"), "x", 0.1, 2, crn=False)
    assert not nc.crn
    with pytest.raises(ValueError):
        fd_gradient(cfg, make_objective("T", "x"), "x", 0.6, 2)
    with pytest.raises(ValueError):
        fd_gradient(cfg, make_objective("T", "x"), "x", 0.1, 1)


def test_frozen_log_eps_range():
    run = run_forward(SimConfig(N=100, T=0.2, seed=0))
    with pytest.raises(ValueError):
        frozen_log_check(run, make_objective("T", "x"), [0], eps=1e-2)


def test_frozen_log_detects_sign_flip(monkeypatch):
    # a corrupted backward step must be caught by the frozen-log identity
    import boltzadj.adjoint as adjmod
    import boltzadj.validation as val

    obj = make_objective("T", "x")
    run = run_forward(SimConfig(N=1000, seed=1))
    good = max(r.rel_error for r in frozen_log_check(run, obj, range(10)))
    real = adjmod.run_adjoint

    def flipped(adjF, log_, observer=None):
        out = real(adjF, log_, observer)
        return adjmod.AdjointEnsemble(-out.gammas, out.time_index)

    monkeypatch.setattr(val, "run_adjoint", flipped)
    bad = max(r.rel_error for r in frozen_log_check(run, obj, range(10)))
    assert good < 1e-6 and bad > 1.0


def test_conservation_drift_zero_for_constant_history():
    h = np.tile(np.array([0.1, 0, 0, 1, 1, 1, 3, 3, 3.0]), (5, 1))
    assert conservation_drift(h) == (0.0, 0.0)


def test_bridge_final_time_is_exact():
    params = InitialConditionParams()
    run = run_forward(SimConfig(N=50_000, T=0.5, seed=2), record_history=False)
    grid = VelocityGrid.for_params(12, params)
    V = run.final_ensemble.velocities
    obj = make_objective("T", "x")
    gF = -grid.nodes()[..., 0] ** 2
    br = bridge_check(V, obj.final_vec(V), gF, grid, n_min=200)
    assert br.n_bins > 0
    assert br.max_abs_diff < 1e-9
    zero = bridge_check(V, np.zeros_like(V), np.full((12, 12, 12), 4.0), grid)
    assert zero.max_abs_diff < 1e-12


def test_validation_suite_small():
    s = ValidateSettings(N=500, n_seeds=2, frozen_particles=4, fd_N=20_000, bridge_N=20_000)
    results = run_validation(SimConfig(N=500), s)
    assert [r.name for r in results] == [
        "conservation.momentum",
        "conservation.energy",
        "frozen_log",
        "duality",
        "bridge.final",
        "crn_fd_vs_adjoint",
    ]
    assert all(r.passed for r in results), [r.line() for r in results]
    data = json.loads(results_json(results))
    assert data[0]["name"] == "conservation.momentum"


def test_suite_line_and_rows():
    assert SuiteResult("x", False, 2.0, "< 1").line() == "[FAIL] x: observed 2, expected < 1"
    rows = table_rows(["a", "b"], np.array([[1.0, 2.0], [3.0, 2.0]]))
    assert rows[0][0] == "a" and rows[0][1] == 2.0 and rows[1][2] == 0.0
