import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from atwflow.distance import signed_distance_array
from atwflow.grid import Box, Disk, GridSpec, ScalarField, SetMask, synth_shape
from atwflow.tv import (SolverParams, TVRelaxation, binary_energy, brute_force_min, discrete_tv,
                        operator_norm_sq, solve_relaxed)


def padded(inside, pad=2):
    return np.pad(inside, pad)


def exhaustive_reference(g, free, base):
    """Independent enumeration: itertools order, least significant bit first."""
    grid = g.grid
    cells = list(zip(*np.nonzero(free)))
    best = None
    for bits in itertools.product((False, True), repeat=len(cells)):
        inside = base.copy()
        for c, b in zip(cells, reversed(bits)):
            inside[c] = b
        e = binary_energy(inside, g.values, grid)
        if best is None or e < best - 1e-12 * max(1.0, abs(best)):
            best = e
    return best


# discrete_tv -----------------------------------------------------------------------

def test_square_anisotropic_exact():
    g = GridSpec.cube(64, 2.0)
    m = synth_shape(g, Box((-0.5, -0.5), (0.5, 0.5)))
    assert discrete_tv(m, "anisotropic") == pytest.approx(4.0, abs=1e-12)


@pytest.mark.parametrize("mode", ["anisotropic", "isotropic", "isotropic-forward"])
def test_constant_field_zero(mode):
    g = GridSpec.cube(16, 1.0)
    assert discrete_tv(ScalarField(g, np.full(g.shape, 0.7)), mode) == 0.0


def test_disk_isotropic_within_6_percent():
    g = GridSpec.cube(256, 2.0)
    m = synth_shape(g, Disk(0.5))
    assert abs(discrete_tv(m, "isotropic") - np.pi) <= 0.06 * np.pi
    # the forward stencil keeps a larger, direction-dependent bias
    assert discrete_tv(m, "isotropic-forward") > 1.1 * np.pi


def test_unknown_mode():
    g = GridSpec.cube(8, 1.0)
    with pytest.raises(ValueError):
        discrete_tv(ScalarField(g, np.zeros(g.shape)), "l3")


@settings(max_examples=200)
@given(arrays(bool, (6, 6)), arrays(bool, (6, 6)))
def test_submodularity(a, b):
    g = GridSpec.cube(10, 1.0)
    A, B = SetMask(g, padded(a)), SetMask(g, padded(b))
    tv = lambda x: discrete_tv(SetMask(g, x), "anisotropic")
    assert tv(A.inside & B.inside) + tv(A.inside | B.inside) <= tv(A.inside) + tv(B.inside) + 1e-12


@given(arrays(bool, (6, 6)), st.lists(st.floats(0.01, 3.0), min_size=3, max_size=3), st.integers(0, 2**32 - 1))
def test_coarea_nested(base, weights, seed):
    rng = np.random.default_rng(seed)
    g = GridSpec.cube(10, 1.0)
    masks = [padded(base)]
    for _ in range(2):
        masks.append(masks[-1] & (rng.random(masks[-1].shape) < 0.6))
    f = sum(c * m for c, m in zip(weights, masks))
    lhs = discrete_tv(ScalarField(g, f), "anisotropic")
    rhs = sum(c * discrete_tv(SetMask(g, m), "anisotropic") for c, m in zip(weights, masks))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


# SolverParams ----------------------------------------------------------------------

def test_step_condition():
    g = GridSpec.cube(16, 1.0)
    for mode in ("anisotropic", "isotropic", "isotropic-forward"):
        tau, sigma = SolverParams(tv_mode=mode).steps(g)
        assert tau * sigma * operator_norm_sq(mode, 2) / g.spacing ** 2 == pytest.approx(1.0)
    assert operator_norm_sq("anisotropic", 3) == 12
    with pytest.raises(ValueError, match="exceeds"):
        SolverParams(tv_mode="anisotropic", primal_step=0.1, dual_step=0.1).steps(g)
    with pytest.raises(ValueError):
        SolverParams(tolerance=0)
    with pytest.raises(ValueError):
        SolverParams(primal_step=0.1)


# solve_relaxed -------------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["anisotropic", "isotropic"])
def test_constant_weights(mode):
    g = GridSpec.cube(16, 1.0)
    u, stats = solve_relaxed(ScalarField(g, np.ones(g.shape)), SolverParams(tv_mode=mode))
    assert np.all(u.values == 0) and stats.converged
    u, stats = solve_relaxed(ScalarField(g, -np.ones(g.shape)), SolverParams(tv_mode=mode))
    assert np.allclose(u.values, 1.0) and stats.converged


def strip_problem():
    """A long slab: far from its ends the interface is a flat half-space boundary."""
    grid = GridSpec((40, 24), 0.1, (0.0, 0.0))
    inside = np.zeros(grid.shape, dtype=bool)
    inside[2:38, 2:12] = True
    g = ScalarField(grid, signed_distance_array(inside, grid) / grid.spacing)
    return grid, inside, g


def test_half_space_strip_matches_brute_force():
    grid, inside, g = strip_problem()
    free = np.zeros(grid.shape, dtype=bool)
    free[18:22, 10:15] = True   # 4 x 5 window across the interface
    best, e_best = brute_force_min(g, free, SetMask(grid, inside))
    E = TVRelaxation(tv_mode="anisotropic", tolerance=1e-9).fit(g).u_.values > 0.5
    assert np.array_equal(best.inside[free], E[free])
    assert binary_energy(best.inside, g.values, grid) == pytest.approx(e_best, rel=1e-12)
    for mode in ("anisotropic", "isotropic"):
        E = TVRelaxation(tv_mode=mode, tolerance=1e-7).fit(g).u_.values > 0.5
        # right edge of the slab, away from its ends
        edge = np.array([np.flatnonzero(row)[-1] for row in E[10:30]])
        assert np.all(np.abs(edge - 11) <= 1)


def test_thresholding_exact_anisotropic(rng):
    grid = GridSpec((8, 9), 0.1, (0.0, 0.0))
    free = np.zeros(grid.shape, dtype=bool)
    free[2:6, 2:7] = True
    for _ in range(5):
        gv = np.full(grid.shape, 5.0)
        gv[free] = rng.normal(0.0, 25.0, free.sum())
        g = ScalarField(grid, gv)
        _, e_best = brute_force_min(g, free)
        est = TVRelaxation(tv_mode="anisotropic", tolerance=1e-10, max_iter=100000).fit(g)
        for s in (0.1, 0.5, 0.9):
            E = est.u_.values > s
            assert binary_energy(E, gv, grid) == pytest.approx(e_best, rel=1e-6, abs=1e-9)


def disk_problem(n=48, h_cells=8.0):
    grid = GridSpec.cube(n, 1.0)
    m = synth_shape(grid, Disk(0.3))
    return grid, ScalarField(grid, signed_distance_array(m.inside, grid) / (h_cells * grid.spacing))


def test_gap_history_monotone():
    grid, g = disk_problem()
    est = TVRelaxation(tolerance=1e-8).fit(g)
    hist = np.array(est.stats_.gap_history)
    assert hist.size > 2
    assert np.all(np.diff(hist) <= 1e-12 * np.abs(hist[:-1]) + 1e-15)
    assert est.stats_.converged and est.stats_.gap <= 1e-8


def test_unconverged_is_flagged():
    grid, g = disk_problem()
    stats = TVRelaxation(tolerance=1e-12, max_iter=100, check_every=50).fit(g).stats_
    assert not stats.converged and stats.iterations == 100 and stats.gap > 1e-12


def test_estimator_api():
    est = TVRelaxation(tv_mode="anisotropic", tolerance=1e-7)
    assert est.get_params()["tolerance"] == 1e-7
    c = clone(est).set_params(max_iter=500)
    assert c.max_iter == 500 and est.max_iter == 20000
    assert est.params == SolverParams(tv_mode="anisotropic", tolerance=1e-7)
    with pytest.raises(NotFittedError):
        est.predict()
    with pytest.raises(TypeError):
        est.fit(np.zeros((8, 8)))
    grid = GridSpec.cube(24, 1.0)
    m = synth_shape(grid, Disk(0.3))
    g = ScalarField(grid, signed_distance_array(m.inside, grid) / grid.spacing)
    out = est.fit(g).predict()
    assert isinstance(out, SetMask)
    assert np.array_equal(est.transform(g).values, est.u_.values)
    with pytest.raises(ValueError):
        est.fit(g, init=np.full(grid.shape, 2.0))


def test_warm_start_saves_iterations():
    grid = GridSpec.cube(64, 1.0)
    m = synth_shape(grid, Disk(0.3))
    g = ScalarField(grid, signed_distance_array(m.inside, grid) / grid.spacing)
    cold = TVRelaxation().fit(g).stats_.iterations
    warm = TVRelaxation(warm_start=True).fit(g)
    warm.fit(g)
    assert warm.stats_.iterations < cold


# brute_force_min ------------------------------------------------------------------------

def test_brute_force_examples():
    grid = GridSpec.cube(9, 0.9)
    free = np.zeros(grid.shape, dtype=bool)
    free[3:6, 3:6] = True
    m, e = brute_force_min(ScalarField(grid, np.ones(grid.shape)), free)
    assert m.is_empty and e == 0.0
    gv = np.full(grid.shape, -10.0 / grid.spacing)
    m, e = brute_force_min(ScalarField(grid, gv), free)
    assert m.count == 9
    assert e == pytest.approx(12 * grid.spacing + 9 * gv[0, 0] * grid.spacing ** 2)
    with pytest.raises(ValueError):
        brute_force_min(ScalarField(grid, gv), np.ones(grid.shape, bool))


def test_brute_force_random_4x5(rng):
    grid = GridSpec((8, 9), 0.2, (0.0, 0.0))
    free = np.zeros(grid.shape, dtype=bool)
    free[2:6, 2:7] = True
    base = np.zeros(grid.shape, dtype=bool)
    base[2:4, 2:7] = True
    gv = rng.normal(0.0, 8.0, grid.shape)
    g = ScalarField(grid, gv)
    m, e = brute_force_min(g, free, base)
    assert e == pytest.approx(exhaustive_reference(g, free, np.where(free, False, base)), rel=1e-12)
    assert binary_energy(m.inside, gv, grid) == pytest.approx(e, rel=1e-12)
    assert np.array_equal(m.inside[~free], base[~free])


def test_brute_force_tie_break():
    grid = GridSpec.cube(8, 0.8)
    free = np.zeros(grid.shape, dtype=bool)
    free[3, 3] = True
    # a single cell costs 4 faces and gains |g| dx^2: a tie at g = -4/dx
    gv = np.full(grid.shape, -4.0 / grid.spacing)
    m, e = brute_force_min(ScalarField(grid, gv), free)
    assert m.is_empty and e == 0.0
