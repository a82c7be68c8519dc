import math

import numpy as np
import pytest

from boltzadj.core import InitialConditionParams, ParticleEnsemble, sample_initial_ensemble
from boltzadj.grid_adjoint import (
    AngularQuadrature,
    GridField,
    VelocityGrid,
    backward_step_grid,
    collision_gain,
    collision_gain_reference,
    final_gamma,
    gradient_grid,
    histogram_density,
    maxwellian_density,
    read_snapshot,
    snapshot_from_bytes,
    snapshot_to_bytes,
    trilinear_interpolate,
    write_snapshot,
)
from boltzadj.objectives import make_objective

PARAMS = InitialConditionParams(0.5, 1.0, 1.0)


def _maxwellian_field(grid):
    f = maxwellian_density(grid, PARAMS)
    return f / (f.sum() * grid.cell_volume)


def test_grid_geometry():
    g = VelocityGrid.for_params(40, PARAMS)
    assert math.isclose(g.v_th, math.sqrt(5 / 6))
    assert math.isclose(g.coords[0], -5 * g.v_th) and math.isclose(g.coords[-1], 5 * g.v_th)
    assert math.isclose(g.dv, 10 * g.v_th / 39)
    with pytest.raises(ValueError):
        VelocityGrid(4, 1.0)


def test_quadrature():
    q = AngularQuadrature(10, 10)
    nodes = q.nodes
    assert nodes.shape == (100, 3)
    np.testing.assert_allclose(np.linalg.norm(nodes, axis=1), 1, atol=1e-12)
    assert math.isclose(q.weight * 100, 4 * math.pi)
    # even node counts make the set closed under sigma -> -sigma
    flipped = {tuple(np.round(-s, 12)) for s in nodes}
    assert flipped == {tuple(np.round(s, 12)) for s in nodes}


def test_histogram_single_node():
    grid = VelocityGrid(9, 1.0)
    v = grid.nodes()[3, 4, 5]
    field, dropped = histogram_density(ParticleEnsemble(np.tile(v, (10, 1))), grid)
    assert dropped == 0
    assert math.isclose(field.values[3, 4, 5], 1 / grid.cell_volume)
    assert np.count_nonzero(field.values) == 1


def test_histogram_drops_outside():
    grid = VelocityGrid(9, 1.0)
    V = np.array([[0.0, 0, 0], [100.0, 0, 0]])
    field, dropped = histogram_density(V, grid)
    assert dropped == 1
    assert math.isclose(field.mass(), 0.5)
    renorm, _ = histogram_density(V, grid, renormalize=True)
    assert math.isclose(renorm.mass(), 1.0)


def test_histogram_mass_for_maxwellian():
    ens, _ = sample_initial_ensemble(PARAMS, 10**6, 0)
    field, dropped = histogram_density(ens, VelocityGrid.for_params(40, PARAMS))
    assert field.mass() >= 0.999
    assert dropped < 10


def test_trilinear_exact_on_linear_and_clamped():
    n = 8
    c = np.arange(n, dtype=float)
    X, Y, Z = np.meshgrid(c, c, c, indexing="ij")
    g = 1.0 + 2 * X - Y + 0.5 * Z
    p = np.array([[1.3, 2.7, 5.5], [0.0, 0.0, 0.0], [7.0, 7.0, 7.0]])
    np.testing.assert_allclose(trilinear_interpolate(g, p)[:, 0], 1 + 2 * p[:, 0] - p[:, 1] + 0.5 * p[:, 2])
    out = trilinear_interpolate(g, np.array([[-3.0, 20.0, 3.0]]))
    np.testing.assert_allclose(out[0, 0], 1 + 0 - 7 + 1.5)


def test_gain_kernel_matches_reference():
    rng = np.random.default_rng(0)
    grid = VelocityGrid(9, 1.0)
    quad = AngularQuadrature(4, 3)
    g = rng.standard_normal((9, 9, 9, 2))
    f = rng.random((9, 9, 9)) * (rng.random((9, 9, 9)) < 0.4)
    np.testing.assert_allclose(collision_gain(g, f, quad), collision_gain_reference(g, f, quad, grid), rtol=1e-12, atol=1e-12)


def test_constant_field_is_fixed_point():
    grid = VelocityGrid.for_params(12, PARAMS)
    f = _maxwellian_field(grid)
    out = backward_step_grid(np.full((12, 12, 12), 3.0), f, grid, AngularQuadrature(6, 6), 0.1)
    np.testing.assert_allclose(out, 3.0, atol=1e-12)


def test_zero_density_decays():
    grid = VelocityGrid(10, 1.0)
    g = np.random.default_rng(1).standard_normal((10, 10, 10))
    out = backward_step_grid(g, np.zeros((10, 10, 10)), grid, AngularQuadrature(4, 4), 0.1)
    np.testing.assert_allclose(out, 0.9 * g, rtol=1e-14)


def test_sigma_reflection_symmetry():
    rng = np.random.default_rng(2)
    grid = VelocityGrid(10, 1.0)
    quad = AngularQuadrature(6, 4)
    g = rng.standard_normal((10, 10, 10, 1))
    f = _maxwellian_field(grid)
    a = collision_gain(g, f, quad)

    class Flipped:
        nodes = -quad.nodes

    b = collision_gain(g, f, Flipped)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_gain_converges_second_order():
    # smooth synthetic gamma; endpoints are nodes on every grid so only the interpolation error changes
    quad = AngularQuadrature(6, 6)
    va, vb = np.array([2.0, 1.0, 0.0]), np.zeros(3)
    mid, rad = 0.5 * (va + vb), 0.5 * np.linalg.norm(va - vb)
    vp = mid + rad * quad.nodes
    exact = np.sum(np.sin(0.7 * vp[:, 0]) + 0.3 * vp[:, 1] ** 2)
    errs = []
    for n in (11, 21, 41):
        grid = VelocityGrid(n, 1.0)
        nodes = grid.nodes()
        gamma = np.sin(0.7 * nodes[..., 0]) + 0.3 * nodes[..., 1] ** 2
        a = tuple(np.rint(grid.to_index(va)).astype(int))
        b = tuple(np.rint(grid.to_index(vb)).astype(int))
        f = np.zeros((n, n, n))
        f[b] = 1.0
        gain = collision_gain(gamma[..., None], f, quad)[..., 0]
        err = abs(gain[a] - exact)
        # trilinear error per node is at most dv^2/8 times the summed second derivatives (0.49 + 0.6)
        assert err <= len(vp) * grid.dv**2 / 8 * 1.09
        errs.append(err)
    assert errs[2] < errs[0] / 10


def test_gradient_grid_no_evolution():
    grid = VelocityGrid.for_params(40, PARAMS)
    gamma = final_gamma([make_objective("moment2", "x")], np.zeros((2, 3)), grid)
    g = gradient_grid(gamma, PARAMS, grid)
    assert abs(g[0, 0] - 1.0) < 1e-3
    assert abs(g[0, 1]) < 1e-3
    zero = gradient_grid(np.zeros((40, 40, 40)), PARAMS, grid)
    assert np.all(zero == 0)


def test_grid_rejects_non_moment_objective():
    with pytest.raises(ValueError):
        final_gamma([make_objective("matching")], np.zeros((2, 3)), VelocityGrid(8, 1.0))


def test_snapshot_roundtrip(tmp_path):
    grid = VelocityGrid(8, 0.9)
    vals = np.random.default_rng(3).standard_normal((8, 8, 8))
    field = GridField(grid, vals, "gamma", 1.5)
    data = snapshot_to_bytes(field)
    assert len(data) == 24 + 8 * 512
    # x varies fastest in the file
    first = np.frombuffer(data[24:40], "<f8")
    np.testing.assert_array_equal(first, [vals[0, 0, 0], vals[1, 0, 0]])
    back = snapshot_from_bytes(data)
    np.testing.assert_array_equal(back.values, vals)
    assert back.t == 1.5 and back.grid == grid
    p = tmp_path / "g.bin"
    write_snapshot(field, p)
    assert snapshot_to_bytes(read_snapshot(p)) == data
    with pytest.raises(ValueError):
        snapshot_from_bytes(data[:-8])
    with pytest.raises(FileNotFoundError):
        read_snapshot(tmp_path / "nope.bin")


def test_field_validation():
    grid = VelocityGrid(8, 1.0)
    with pytest.raises(ValueError):
        GridField(grid, np.zeros((7, 8, 8)))
    with pytest.raises(ValueError):
        GridField(grid, -np.ones((8, 8, 8)), "density")
