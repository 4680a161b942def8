import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from atwflow.distance import (NoInterfaceError, distance_field, signed_distance, signed_distance_array,
                              squared_edt_cells, subcell_signed_distance, unsigned_edt)
from atwflow.grid import Box, Disk, GridSpec, SetMask, synth_shape


def brute_force_nearest(inside):
    """All-pairs distance, in cells, to the nearest opposite-phase centre."""
    idx = np.indices(inside.shape).reshape(inside.ndim, -1).T.astype(float)
    flat = inside.ravel()
    out = np.empty(flat.size)
    for i, p in enumerate(idx):
        other = idx[flat != flat[i]]
        out[i] = np.sqrt(((other - p) ** 2).sum(axis=1).min())
    return out.reshape(inside.shape)


def test_half_space_is_exact():
    g = GridSpec.cube(16, 1.6)
    inside = np.zeros(g.shape, dtype=bool)
    inside[:7] = True
    sd = signed_distance_array(inside, g)
    j = np.arange(16)
    # the interface sits half way between rows 6 and 7
    expected = (j - 6.5) * g.spacing
    assert np.allclose(sd, np.broadcast_to(expected[:, None], g.shape), rtol=0, atol=1e-15)


def test_outside_point_at_distance_03():
    g = GridSpec((40, 40), 0.12, (0.0, 0.0))
    inside = np.zeros(g.shape, dtype=bool)
    inside[:20] = True
    sd = signed_distance_array(inside, g)
    assert sd[22, 10] == pytest.approx(0.3, abs=1e-15)


def test_disk_centre_distance():
    g = GridSpec.cube(128, 2.0)
    m = synth_shape(g, Disk(0.5, (g.spacing / 2, g.spacing / 2)))
    d = unsigned_edt(m)
    sd = signed_distance(m)
    c = (64, 64)
    assert abs(d.values[c] - 0.5) <= g.spacing
    assert abs(sd.values[c] + 0.5) <= g.spacing


def test_single_cell_pythagorean():
    g = GridSpec.cube(16, 1.6)
    inside = np.zeros(g.shape, dtype=bool)
    inside[6, 6] = True
    d = unsigned_edt(SetMask(g, inside))
    assert d.values[9, 10] == pytest.approx(4.5 * g.spacing, abs=1e-15)
    assert np.allclose(d.values, (brute_force_nearest(inside) - 0.5) * g.spacing, rtol=0, atol=1e-14)
    assert d.values[6, 6] == 0.5 * g.spacing


def test_no_interface_errors():
    g = GridSpec.cube(12, 1.0)
    with pytest.raises(NoInterfaceError, match="no interface"):
        unsigned_edt(SetMask.empty(g))
    with pytest.raises(NoInterfaceError):
        signed_distance_array(np.ones(g.shape, bool), g)
    with pytest.raises(NoInterfaceError):
        subcell_signed_distance(SetMask.empty(g))


def test_brute_force_equivalence_50_masks(rng):
    for trial in range(50):
        dim = 2 if trial < 35 else 3
        n = rng.integers(4, 21) if dim == 2 else rng.integers(4, 8)
        shape = tuple(int(n) for _ in range(dim))
        inside = rng.random(shape) < rng.uniform(0.05, 0.95)
        if inside.all() or not inside.any():
            inside.flat[0] = not inside.flat[0]
        g = GridSpec(shape, 0.1, (0.0,) * dim)
        d = np.abs(signed_distance_array(inside, g))
        assert np.allclose(d, (brute_force_nearest(inside) - 0.5) * 0.1, rtol=0, atol=1e-13)


def test_squared_edt_without_sites():
    assert np.isinf(squared_edt_cells(np.zeros((4, 5), bool))).all()


masks = arrays(bool, st.tuples(st.integers(4, 14), st.integers(4, 14))).filter(
    lambda a: a.any() and not a.all())


@given(masks)
def test_complement_antisymmetry(inside):
    g = GridSpec(inside.shape, 0.25, (0.0, 0.0))
    assert np.array_equal(signed_distance_array(~inside, g), -signed_distance_array(inside, g))


@given(masks)
def test_sign_and_lipschitz(inside):
    g = GridSpec(inside.shape, 0.25, (0.0, 0.0))
    sd = signed_distance_array(inside, g)
    assert np.all((sd < 0) == inside)
    d = np.abs(sd)
    for axis in (0, 1):
        assert np.all(np.abs(np.diff(d, axis=axis)) <= g.spacing + g.spacing + 1e-12)


@given(masks, masks)
def test_monotone_under_dilation(a, b):
    shape = tuple(min(x, y) for x, y in zip(a.shape, b.shape))
    a, b = a[:shape[0], :shape[1]], b[:shape[0], :shape[1]]
    small, big = a & b, a | b
    if not small.any() or big.all():
        return
    g = GridSpec(shape, 0.25, (0.0, 0.0))
    assert np.all(signed_distance_array(small, g) >= signed_distance_array(big, g))


def test_distance_field_kinds():
    g = GridSpec.cube(64, 2.0)
    m = synth_shape(g, Disk(0.5))
    for kind in ("center", "subcell"):
        df = distance_field(m, kind)
        assert np.array_equal(df.d.values, np.abs(df.sd.values))
        assert np.all((df.sd.values < 0) == m.inside)
    with pytest.raises(ValueError):
        distance_field(m, "fast-marching")


def test_subcell_disk_accuracy():
    g = GridSpec.cube(128, 2.0)
    m = synth_shape(g, Disk(0.5))
    sd = subcell_signed_distance(m).values
    exact = g.radius() - 0.5
    band = np.abs(exact) < 0.2
    assert np.abs(sd - exact)[band].max() < 0.3 * g.spacing
    sd_c = signed_distance(m).values
    assert np.abs(sd_c - exact)[band].max() > np.abs(sd - exact)[band].max()


def test_subcell_complement_and_box():
    g = GridSpec.cube(48, 2.0)
    m = synth_shape(g, Box((-0.5, -0.3), (0.4, 0.5)))
    sd = subcell_signed_distance(m).values
    assert np.all((sd < 0) == m.inside)
    from atwflow.distance import subcell_signed_distance_array
    assert np.allclose(subcell_signed_distance_array(~m.inside, g), -sd)
