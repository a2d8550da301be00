
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specklesense.calibration import measure_correlation
from specklesense.errors import ConfigurationError, DegenerateInputError, DomainError, ShapeError
from specklesense.mechanics import Shape
from specklesense.optics import (NOISELESS, MaterialConfig, NoiseConfig, Stimulus,
                                 build_material, expose, far_field_intensity, phase_map,
                                 read_pgm, render_speckle, speckle_correlation,
                                 surface_displacement, write_pgm)
from oracles import direct_dft2_energy, pearson

X0 = Stimulus(150.0, 500.0, 22.0)


# -- configuration and material ----------------------------------------------

@pytest.mark.parametrize("changes", [
    {"grid_size": 100}, {"grid_size": 1}, {"extent": 0.0}, {"extent": 5.0},
    {"spot_diameter": 0.0}, {"indenter_radius": 0.0}, {"deform_gain": 0.0},
    {"thermal_gain": -1.0},
])
def test_invalid_config(changes):
    with pytest.raises(ConfigurationError):
        MaterialConfig(**changes)


def test_material_deterministic(config):
    a, b = build_material(config), build_material(config)
    for name in ("base_phase", "aperture", "thermal_field", "strain_field", "drift_field"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_seeds_give_different_screens():
    a = build_material(MaterialConfig(seed=1)).base_phase
    b = build_material(MaterialConfig(seed=2)).base_phase
    assert np.mean(a != b) > 0.99


def test_field_statistics(field):
    assert np.all((field.base_phase >= 0) & (field.base_phase < 2 * np.pi))
    assert np.all(field.aperture >= 0)
    for h in (field.thermal_field, field.drift_field):
        assert abs(h.mean()) < 0.05
        assert abs(h.var() - 1.0) < 0.1


def test_field_is_read_only(field):
    with pytest.raises(ValueError):
        field.base_phase[0, 0] = 1.0


# -- surface displacement ---------------------------------------------------

def test_displacement_peak_under_contact(field):
    u = surface_displacement(field, 200.0, 0.0)
    assert u.max() == pytest.approx(200.0)
    centre = field.config.grid_size // 2
    assert u[centre, centre] == 200.0


def test_displacement_point_evaluation(field):
    u = surface_displacement(field, 200.0, 0.0, points=(np.array([0.0, 80.0]), np.array([0.0, 0.0])))
    assert u[0] == 200.0
    assert u[1] < 0.17 * 200.0


def test_displacement_zero_depth(field):
    for shape in Shape:
        assert np.all(surface_displacement(field, 0.0, 300.0, shape) == 0)


def test_displacement_follows_position(field):
    u = surface_displacement(field, 100.0, 2000.0)
    row, _ = np.unravel_index(np.argmax(u), u.shape)
    y_mm = field.yy[row, 0]
    assert abs(y_mm - 2.0) < 1.6


def test_negative_depth_rejected(field):
    with pytest.raises(DomainError):
        surface_displacement(field, -1.0, 0.0)


# -- rendering -----------------------------------------------------------------

def test_render_deterministic(field):
    a = render_speckle(field, X0, NoiseConfig(seed=5))
    b = render_speckle(field, X0, NoiseConfig(seed=5))
    assert np.array_equal(a.pixels, b.pixels)
    assert np.array_equal(a.intensities, b.intensities)


def test_render_value_ranges(field):
    img = render_speckle(field, X0, NoiseConfig(seed=1))
    assert img.pixels.dtype == np.uint8
    assert (img.height, img.width) == (256, 256)
    assert np.all(img.intensities >= 0)
    assert img.exposure_scale > 0


def test_noise_seed_changes_pixels(field):
    a = render_speckle(field, X0, NoiseConfig(seed=1)).pixels
    b = render_speckle(field, X0, NoiseConfig(seed=2)).pixels
    assert not np.array_equal(a, b)
    assert speckle_correlation(a.astype(float), b.astype(float)) > 0.95


def test_parseval_against_direct_dft():
    rng = np.random.default_rng(0)
    aperture = rng.uniform(0, 1, (16, 16))
    phase = rng.uniform(0, 2 * np.pi, (16, 16))
    intensity = far_field_intensity(aperture, phase)
    expected = direct_dft2_energy((aperture * np.exp(1j * phase)).tolist())
    assert intensity.sum() == pytest.approx(expected, rel=1e-10)
    assert intensity.sum() == pytest.approx(16 * 16 * np.sum(aperture**2), rel=1e-10)


def test_parseval_on_material(field):
    intensity = far_field_intensity(field.aperture, phase_map(field, X0))
    n = field.config.grid_size
    rel = abs(intensity.sum() - n * n * np.sum(field.aperture**2)) / intensity.sum()
    assert rel < 1e-10


@given(offset=st.floats(-50, 50))
@settings(max_examples=10, deadline=None)
def test_global_phase_invariance(field, offset):
    base = render_speckle(field, X0, NoiseConfig(seed=3))
    shifted = render_speckle(field, X0, NoiseConfig(seed=3),
                             extra_phase=np.full(field.base_phase.shape, offset))
    assert np.array_equal(base.pixels, shifted.pixels)


@pytest.mark.parametrize("x", [Stimulus(-1.0, 0, 22), Stimulus(5000.0, 0, 22),
                               Stimulus(100, 1e6, 22), Stimulus(100, 0, 80.0)])
def test_out_of_bounds_stimulus(field, x):
    with pytest.raises(DomainError):
        render_speckle(field, x)


def test_large_depth_step_decorrelates(field):
    a = render_speckle(field, X0, NoiseConfig(seed=1))
    b = render_speckle(field, X0.replace(depth=X0.depth + 300), NoiseConfig(seed=2))
    assert speckle_correlation(a, b) < 0.2


def test_shapes_render_differently(field):
    imgs = [render_speckle(field, X0.replace(shape=s), NOISELESS) for s in
            (Shape.CIRCLE, Shape.SQUARE, Shape.TRIANGLE)]
    assert speckle_correlation(imgs[0], imgs[1]) < 0.9
    assert speckle_correlation(imgs[1], imgs[2]) < 0.9


def test_noiseless_quantize_off(field):
    img = render_speckle(field, X0, NOISELESS, quantize=False)
    assert img.pixels is None
    assert np.array_equal(img.values, img.intensities)


def test_exposure_maps_percentile():
    intensity = np.linspace(0, 1000, 10_000).reshape(100, 100)
    img = expose(intensity, NOISELESS)
    assert np.percentile(img.intensities, 99) == pytest.approx(230.0)


# -- correlation -------------------------------------------------------------

def test_self_correlation(field):
    img = render_speckle(field, X0)
    assert speckle_correlation(img, img) == pytest.approx(1.0)


def test_correlation_matches_statistics_module(rng):
    a, b = rng.random((16, 16)), rng.random((16, 16))
    assert speckle_correlation(a, b) == pytest.approx(pearson(a, b), abs=1e-12)


def test_independent_materials_uncorrelated():
    a = render_speckle(build_material(MaterialConfig(seed=1)), X0, NoiseConfig(seed=1))
    b = render_speckle(build_material(MaterialConfig(seed=2)), X0, NoiseConfig(seed=2))
    assert abs(speckle_correlation(a, b)) < 0.1


def test_correlation_errors():
    with pytest.raises(ShapeError):
        speckle_correlation(np.ones((4, 4)), np.ones((4, 5)))
    with pytest.raises(DegenerateInputError):
        speckle_correlation(np.ones((4, 4)), np.arange(16.0).reshape(4, 4))


@pytest.mark.parametrize("axis,deltas", [
    ("depth", (4.0, 12.0, 30.0, 100.0)),
    ("position", (60.0, 240.0, 1000.0)),
    ("temperature", (0.1, 0.4, 1.6)),
])
def test_correlation_decays_monotonically(field, axis, deltas):
    c = [measure_correlation(field, axis, d, probes=8) for d in deltas]
    assert all(b <= a + 0.05 for a, b in zip(c, c[1:])), c


def test_interface_mode_less_sensitive(config):
    full = build_material(config)
    interface = build_material(config.interface())
    for axis, delta in (("depth", 12.0), ("position", 120.0)):
        assert measure_correlation(interface, axis, delta) >= measure_correlation(full, axis, delta)


# -- PGM ---------------------------------------------------------------------

def test_pgm_round_trip(tmp_path, field):
    img = render_speckle(field, X0)
    write_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img.pixels)


def test_pgm_rejects_float(tmp_path):
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "a.pgm", np.zeros((4, 4)))
