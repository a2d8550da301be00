import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from specklesense.mechanics import (DEFAULT_FORCE_COEFFS, _footprint, FORCE_FIT_RANGE, Shape,
                                    fit_force_polynomial, flat_punch_profile, force_from_depth,
                                    shaped_displacement, synthetic_loading_curve)
from oracles import flat_punch


def test_flat_punch_inside_equals_depth():
    assert flat_punch_profile(np.array([0.0]), 200.0, 1.5)[0] == 200.0


def test_flat_punch_far_field_decay():
    # r = 4 * extent = 80 mm: (2/pi) asin(1.5/80) = 0.0119 of the depth
    value = flat_punch_profile(np.array([80.0]), 100.0, 1.5)[0]
    assert value < 0.17 * 100.0
    assert value == pytest.approx(100.0 * 2 / math.pi * math.asin(1.5 / 80.0), rel=1e-12)


def test_zero_depth_is_flat():
    r = np.linspace(0, 20, 50)
    assert np.all(flat_punch_profile(r, 0.0, 1.5) == 0)


@given(r=st.floats(0, 100), depth=st.floats(0, 1000), a=st.floats(0.1, 5))
def test_flat_punch_matches_scalar_formula(r, depth, a):
    got = flat_punch_profile(np.array([r]), depth, a)[0]
    assert got == pytest.approx(flat_punch(r, depth, a), rel=1e-12, abs=1e-12)


@given(depth=st.floats(0, 500))
def test_flat_punch_continuous_at_edge(depth):
    a = 1.5
    inside = flat_punch_profile(np.array([a]), depth, a)[0]
    outside = flat_punch_profile(np.array([a * (1 + 1e-9)]), depth, a)[0]
    assert outside == pytest.approx(inside, rel=1e-4, abs=1e-9)


@pytest.mark.parametrize("shape", [Shape.SQUARE, Shape.TRIANGLE])
def test_shaped_footprint_peak_and_area(shape):
    n, pixel, radius = 128, 20.0 / 128, 1.5
    c = (np.arange(n) - n / 2) * pixel
    yy, xx = np.meshgrid(c, c, indexing="ij")
    u = shaped_displacement(xx, yy, 150.0, 0.0, shape, radius, pixel)
    assert u.max() == pytest.approx(150.0)
    assert u.min() >= 0


@pytest.mark.parametrize("shape", [Shape.SQUARE, Shape.TRIANGLE])
def test_footprint_area_equals_circle(shape):
    h = 0.005
    c = np.arange(-3, 3, h) + h / 2
    yy, xx = np.meshgrid(c, c, indexing="ij")
    area = _footprint(shape, xx, yy, 1.5).sum() * h * h
    assert area == pytest.approx(math.pi * 1.5**2, rel=2e-3)


def test_shapes_are_distinct():
    n, pixel = 128, 20.0 / 128
    c = (np.arange(n) - n / 2) * pixel
    yy, xx = np.meshgrid(c, c, indexing="ij")
    maps = [flat_punch_profile(np.hypot(xx, yy), 100.0, 1.5)]
    maps += [shaped_displacement(xx, yy, 100.0, 0.0, s, 1.5, pixel)
             for s in (Shape.SQUARE, Shape.TRIANGLE)]
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.abs(maps[i] - maps[j]).max() > 5.0


def test_shape_codes_round_trip():
    for s in Shape:
        assert Shape.from_code(s.code) is s
        assert Shape.parse(s.value) is s


def test_force_at_zero_and_anchor():
    assert force_from_depth(0.0).newtons == 0.0
    assert force_from_depth(190.0).newtons == pytest.approx(1.2, abs=0.05)


def test_force_monotone_over_fitted_range():
    depths = np.linspace(*FORCE_FIT_RANGE, 2001)
    forces = [force_from_depth(d).newtons for d in depths]
    assert np.all(np.diff(forces) > 0)


def test_force_extrapolation_flag():
    assert not force_from_depth(100.0).extrapolated
    assert force_from_depth(250.0).extrapolated
    assert force_from_depth(-1.0).extrapolated


def test_default_coefficients_reproduce_fit():
    d = np.linspace(*FORCE_FIT_RANGE, 107)
    coeffs, rmse = fit_force_polynomial(d, synthetic_loading_curve(d))
    assert rmse < 0.0016
    np.testing.assert_allclose(coeffs, DEFAULT_FORCE_COEFFS, rtol=1e-6, atol=1e-12)


def test_force_needs_five_coefficients():
    with pytest.raises(ValueError):
        force_from_depth(10.0, coeffs=(0, 1, 2))
