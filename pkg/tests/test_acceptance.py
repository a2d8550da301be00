"""Acceptance criteria, one test each, with pinned tolerances.

Every test records a PASS/FAIL line that the session summary prints.  Run
standalone with ``python3 tests/test_acceptance.py``.  The full suite trains
several desk-scale models and takes roughly 45 minutes on one core.
"""

import sys
import time

import numpy as np
import pytest

from specklesense.calibration import calibrate_sensitivity, measure_correlation
from specklesense.dataset import (DESK_PROTOCOL, SweepProtocol, Axis, dataset_from_bytes,
                                  dataset_to_bytes, generate_dataset)
from specklesense.errors import FormatError
from specklesense.evaluation import (DRIFT_DAYS, ExperimentConfig, cell_seeds, evaluate_regression,
                                     experiment_drift, experiment_interface, experiment_intervals,
                                     experiment_sample_size, experiment_shapes, interface_field,
                                     interpolation_protocol, train_model)
from specklesense.baseline import linear_architecture
from specklesense.nn import (Architecture, TrainConfig, build_decoder, build_linear_baseline,
                             model_from_bytes, model_to_bytes)
from specklesense.nn.layers import (BatchNorm, Conv2D, Dense, Flatten, MaxPool2, ReLU,
                                    cross_entropy, mse)
from specklesense.optics import (NoiseConfig, Stimulus, build_material,
                                 far_field_intensity, phase_map, render_speckle)
from acceptance_log import record
from gradcheck import check_layer, model_gradient_errors
from oracles import max_relative_error, numeric_gradient
from pipeline import artifacts, run_pipeline

pytestmark = pytest.mark.slow

# pinned tolerances
GRAD_TOL = 1e-4
GRAD_SECONDS = 60.0
PARSEVAL_TOL = 1e-10
RENDERS, RENDER_SECONDS = 1000, 60.0
C_DEPTH_12 = (0.51, 0.71)
C_POSITION_120 = (0.56, 0.76)
DESK_REL_MAX = 8.0              # percent, per feature
PIPELINE_SECONDS = 30 * 60.0
SHAPE_ACCURACY_MIN = 0.90
SHAPE_DEPTH_REL_MAX = 8.0
INTERFACE_ACCURACY = 1.0
DRIFT_STEP_TOL = 0.2            # percent absolute
DRIFT_RISE_MAX = 5.0            # percent absolute
FLATTEN_MAX = 0.10              # relative improvement beyond N_d
FUZZ_CASES = 100
SEEDS = (0, 1, 2)

DESK = ExperimentConfig(train=TrainConfig(epochs=8), seeds=SEEDS)
X0 = Stimulus(150.0, 400.0, 22.0)


@pytest.fixture(scope="module")
def desk(field):
    """Seed-0 desk-scale cell shared by criteria 4, 5, 10 and 11."""
    t0 = time.perf_counter()
    s = cell_seeds(0)
    train = generate_dataset(field, DESK_PROTOCOL, DESK.noise, seed=s["train_data"])
    test = generate_dataset(field, interpolation_protocol(DESK_PROTOCOL), DESK.noise,
                            seed=s["test_data"])
    model, _ = train_model(Architecture(), train, DESK, 0)
    report = evaluate_regression(model, test)
    return {"train": train, "test": test, "model": model, "report": report,
            "seconds": time.perf_counter() - t0}


def test_01_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    layers = {
        "conv": (Conv2D(2, 3, 5, rng), rng.normal(size=(2, 6, 6, 2))),
        "relu": (ReLU(), rng.normal(size=(3, 7))),
        "batchnorm-4d": (BatchNorm(3), rng.normal(size=(4, 3, 3, 3))),
        "batchnorm-2d": (BatchNorm(5), rng.normal(size=(6, 5))),
        "maxpool": (MaxPool2(), rng.normal(size=(2, 4, 4, 2))),
        "flatten": (Flatten(), rng.normal(size=(2, 2, 2, 3))),
        "dense": (Dense(6, 4, rng), rng.normal(size=(5, 6))),
    }
    errors = {name: max(check_layer(layer, x, rng).values()) for name, (layer, x) in layers.items()}
    p, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    errors["mse"] = max_relative_error(mse(p, t)[1], numeric_gradient(lambda: mse(p, t)[0], p))
    labels = rng.integers(0, 3, 4)
    errors["cross-entropy"] = max_relative_error(
        cross_entropy(p, labels)[1], numeric_gradient(lambda: cross_entropy(p, labels)[0], p))
    model = build_decoder(Architecture(), seed=0, dtype=np.float64)
    probes = {}
    full = model_gradient_errors(model, rng.normal(size=(2, 64, 64)), rng.uniform(0, 1, (2, 3)),
                                 per_tensor=3, report=probes)
    errors["full model"] = max(full.values())
    seconds = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < GRAD_TOL and seconds < GRAD_SECONDS
    record(1, "gradient correctness", ok,
           f"max rel err {errors[worst]:.2e} ({worst}) < {GRAD_TOL:g}; {seconds:.1f} s; "
           f"{probes['retried']}/{probes['entries']} model probes shrank the step at a switch")
    assert ok, errors


def test_02_energy_and_phase_invariants(field):
    intensity = far_field_intensity(field.aperture, phase_map(field, X0))
    n = field.config.grid_size
    parseval = abs(intensity.sum() - n * n * np.sum(field.aperture**2)) / intensity.sum()
    base = render_speckle(field, X0, NoiseConfig(seed=3))
    invariant = all(
        np.array_equal(base.pixels, render_speckle(
            field, X0, NoiseConfig(seed=3),
            extra_phase=np.full(field.base_phase.shape, offset)).pixels)
        for offset in (0.7, np.pi, -12.0))
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    for i in range(RENDERS):
        x = Stimulus(rng.uniform(100, 212), rng.uniform(0, 800), rng.uniform(21, 23))
        render_speckle(field, x, NoiseConfig(seed=i))
    seconds = time.perf_counter() - t0
    ok = parseval < PARSEVAL_TOL and invariant and seconds < RENDER_SECONDS
    record(2, "energy/phase invariants", ok,
           f"Parseval rel err {parseval:.1e}; phase invariance exact={invariant}; "
           f"{RENDERS} renders in {seconds:.1f} s")
    assert ok


def test_03_calibration_fidelity(config):
    calibrated = calibrate_sensitivity(config)
    f = build_material(calibrated)
    c = {(axis, d): measure_correlation(f, axis, d)
         for axis, d in (("depth", 12.0), ("depth", 52.0), ("position", 120.0),
                         ("position", 520.0))}
    ok = (C_DEPTH_12[0] <= c["depth", 12.0] <= C_DEPTH_12[1]
          and C_POSITION_120[0] <= c["position", 120.0] <= C_POSITION_120[1]
          and c["depth", 52.0] < c["depth", 12.0] and c["position", 520.0] < c["position", 120.0])
    record(3, "calibration fidelity", ok,
           f"C(12um)={c['depth', 12.0]:.3f} C(52um)={c['depth', 52.0]:.3f} "
           f"C(120um)={c['position', 120.0]:.3f} C(520um)={c['position', 520.0]:.3f}")
    assert ok


def test_04_desk_regression(desk):
    rel = desk["report"].relative
    ok = bool(np.all(rel <= DESK_REL_MAX)) and desk["seconds"] <= PIPELINE_SECONDS
    record(4, "desk-scale regression", ok,
           "relative error depth/position/temperature = "
           + "/".join(f"{r:.2f}" for r in rel) + f" % (<= {DESK_REL_MAX:g}); "
           f"pipeline {desk['seconds'] / 60:.1f} min on 1 core")
    assert ok


def test_05_baseline_ordering(desk):
    train, test = desk["train"], desk["test"]
    bounds = desk["model"].bounds
    cnn = [desk["report"].mean_relative]
    for seed in SEEDS[1:]:
        model, _ = train_model(Architecture(), train, DESK, seed, bounds=bounds)
        cnn.append(evaluate_regression(model, test).mean_relative)
    linear = []
    for seed in SEEDS:
        model, _ = train_model(linear_architecture(), train, DESK, seed, bounds=bounds)
        linear.append(evaluate_regression(model, test).mean_relative)
    ok = np.mean(cnn) < np.mean(linear)
    record(5, "baseline ordering", ok,
           f"CNN {np.mean(cnn):.2f} % < linear {np.mean(linear):.2f} % (3-seed means)")
    assert ok


def test_06_interval_effect(field):
    fine, coarse = experiment_intervals(field, config=DESK)
    ok = coarse["mean_rel_pct"] > fine["mean_rel_pct"]
    record(6, "interval effect", ok,
           f"C={fine['C_depth']:.2f}/{fine['C_position']:.2f}: {fine['mean_rel_pct']:.2f} % < "
           f"C={coarse['C_depth']:.2f}/{coarse['C_position']:.2f}: {coarse['mean_rel_pct']:.2f} %")
    assert ok


def test_07_sample_size_effect(field):
    nd = DESK_PROTOCOL.grid_size
    rows = experiment_sample_size(field, DESK_PROTOCOL, [nd // 4, nd, 2 * nd], steps=100,
                                  config=DESK)
    err = {r["n_train"]: r["mean_rel_pct"] for r in rows}
    small, at_nd, double = err[nd // 4], err[nd], err[2 * nd]
    further = (at_nd - double) / at_nd
    ok = double < small and further <= FLATTEN_MAX
    record(7, "sample-size effect", ok,
           f"err(N_d/4)={small:.2f} % > err(2N_d)={double:.2f} %; "
           f"improvement beyond N_d={err[nd]:.2f} % is {100 * further:.1f} % (<= {100 * FLATTEN_MAX:g} %)")
    assert ok


def test_08_shape_task(field):
    report, info = experiment_shapes(field, config=DESK.replace(seeds=(0,)))
    ok = (info["n_train"] == 405 and info["n_test"] == 45
          and info["accuracy"] >= SHAPE_ACCURACY_MIN
          and info["depth_rel_pct"] <= SHAPE_DEPTH_REL_MAX)
    record(8, "shape task", ok,
           f"{info['n_train']}/{info['n_test']} split, accuracy {info['accuracy']:.3f}, "
           f"depth {info['depth_rel_pct']:.2f} %")
    assert ok


def test_09_interface_task(config):
    report, info = experiment_interface(interface_field(config))
    ok = info["n_train"] == 320 and info["accuracy"] >= INTERFACE_ACCURACY
    record(9, "interface task", ok,
           f"{info['n_train']} training presses, test accuracy {info['accuracy']:.3f} "
           f"(train {info['train_accuracy']:.3f})")
    assert ok


def test_10_drift_trend(field, desk):
    rows = experiment_drift(field, desk["model"], DESK_PROTOCOL, DRIFT_DAYS, config=DESK,
                            test_seed=cell_seeds(0)["test_data"])
    err = np.array([r["mean_rel_pct"] for r in rows])
    rise = err[-1] - err[0]
    ok = (bool(np.all(np.diff(err) >= -DRIFT_STEP_TOL)) and rise <= DRIFT_RISE_MAX
          and err[0] == desk["report"].mean_relative)
    record(10, "drift trend", ok,
           "mean error by day " + ", ".join(f"{d:g}:{e:.2f}" for d, e in zip(DRIFT_DAYS, err))
           + f" %; day-30 rise {rise:.2f} % (<= {DRIFT_RISE_MAX:g})")
    assert ok


def test_11_formats(field, desk):
    small = generate_dataset(field, SweepProtocol(depth=Axis(100.0, 16.0, 2),
                                                  position=Axis(0.0, 160.0, 2),
                                                  temperature=Axis(21.8, 0.2, 2)), seed=5)
    blob = dataset_to_bytes(small)
    exact = dataset_from_bytes(blob).equals(small) and dataset_to_bytes(dataset_from_bytes(blob)) == blob
    model_blob = model_to_bytes(desk["model"])
    exact = exact and model_to_bytes(model_from_bytes(model_blob)) == model_blob
    rng = np.random.default_rng(11)
    typed = 0
    linear_blob = model_to_bytes(build_linear_baseline(input_size=8, seed=0))
    for case in range(FUZZ_CASES):
        data, decode = (blob, dataset_from_bytes) if case % 2 else (linear_blob, model_from_bytes)
        if case < FUZZ_CASES // 2:
            bad = data[:int(rng.integers(0, len(data)))]
        else:
            flipped = bytearray(data)
            flipped[int(rng.integers(0, len(data)))] ^= 1 << int(rng.integers(0, 8))
            bad = bytes(flipped)
        try:
            decode(bad)
        except FormatError:
            typed += 1
    ok = exact and typed == FUZZ_CASES
    record(11, "formats", ok,
           f"bit-exact round trips={exact}; {typed}/{FUZZ_CASES} corruptions raised typed errors")
    assert ok


def test_12_determinism(tmp_path):
    runs = {"first": ("--reproducible",), "second": ("--reproducible",),
            "threads-4": ("--reproducible", "--threads", "4")}
    outputs, codes = {}, []
    for name, flags in runs.items():
        codes += run_pipeline(tmp_path / name, *flags)
        outputs[name] = artifacts(tmp_path / name)
    same = outputs["first"] == outputs["second"] == outputs["threads-4"]
    ok = same and not any(codes)
    record(12, "determinism", ok,
           f"{len(outputs['first'])} artifacts byte-identical across 2 runs and threads 1/4: {same}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
