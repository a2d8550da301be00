"""Error metrics, reports and the scripted experiments."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import measure_correlation
from .dataset import (DEPTH_JITTER, DESK_PROTOCOL, Axis, Dataset, DriftConfig, SweepProtocol,
                      generate_dataset, interval_protocol)
from .errors import ConfigurationError, DegenerateInputError, EmptyProtocolError
from .mechanics import Shape
from .nn import (Architecture, DecoderModel, TrainConfig, build_decoder, fit, predict)
from .optics import FEATURES, MaterialField, NoiseConfig, build_material

# Reference figures from the full-scale bench experiment (not reproducible here).
REFERENCE_RELATIVE_ERRORS = {"depth": 3.52, "position": 3.33, "temperature": 2.85}
REFERENCE_LATENCY_MS = (206.0, 50.0)


# -- metrics ---------------------------------------------------------------

def relative_error(pred, truth, bounds) -> np.ndarray:
    """Per-feature mean |x - x_hat| as a percentage of the training range."""
    pred = np.asarray(pred, float).reshape(-1, np.shape(bounds)[0])
    truth = np.asarray(truth, float).reshape(pred.shape)
    bounds = np.asarray(bounds, float)
    span = bounds[:, 1] - bounds[:, 0]
    if np.any(span <= 0):
        raise DegenerateInputError("relative error needs max > min for every feature")
    return np.mean(np.abs(pred - truth), axis=0) / span * 100.0


def confusion_matrix(true, pred, k: int) -> np.ndarray:
    """Counts with true classes on rows and predictions on columns."""
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (np.asarray(true, int), np.asarray(pred, int)), 1)
    return m


@dataclass
class EvalReport:
    features: tuple = ()
    mae: np.ndarray = field(default_factory=lambda: np.zeros(0))
    relative: np.ndarray = field(default_factory=lambda: np.zeros(0))   # percent
    std: np.ndarray = field(default_factory=lambda: np.zeros(0))        # std of |error|
    n: int = 0
    classes: tuple = ()
    confusion: np.ndarray | None = None
    latency_ms: tuple | None = None
    predictions: np.ndarray | None = None
    truth: np.ndarray | None = None
    predicted_labels: np.ndarray | None = None
    true_labels: np.ndarray | None = None

    @property
    def mean_relative(self) -> float:
        return float(np.mean(self.relative)) if len(self.relative) else float("nan")

    @property
    def accuracy(self) -> float | None:
        if self.confusion is None:
            return None
        return float(np.trace(self.confusion) / self.confusion.sum())

    def row(self) -> dict:
        out = {"n": self.n}
        for f, a, r, s in zip(self.features, self.mae, self.relative, self.std):
            out[f"{f}_mae"] = float(a)
            out[f"{f}_rel_pct"] = float(r)
            out[f"{f}_std"] = float(s)
        if len(self.relative):
            out["mean_rel_pct"] = self.mean_relative
        if self.confusion is not None:
            out["accuracy"] = self.accuracy
        if self.latency_ms is not None:
            out["latency_ms_mean"], out["latency_ms_std"] = self.latency_ms
        return out

    def summary(self) -> str:
        lines = [f"samples: {self.n}"]
        for f, a, r, s in zip(self.features, self.mae, self.relative, self.std):
            lines.append(f"{f:>12}: MAE {a:.4g} (std {s:.3g}), relative {r:.3f} %")
        if self.confusion is not None:
            lines.append(f"accuracy: {self.accuracy:.4f}")
            lines.append("confusion (rows true, columns predicted): " + ", ".join(self.classes))
            lines += ["  " + " ".join(f"{v:4d}" for v in row) for row in self.confusion]
        if self.latency_ms is not None:
            lines.append("inference latency: {:.2f} +- {:.2f} ms".format(*self.latency_ms))
        return "\n".join(lines)


def class_labels(d: Dataset, classes) -> np.ndarray:
    """Class index per sample: nearest class centre for position tasks,
    otherwise the index of the sample's shape name."""
    centres = d.metadata.get("class_positions")
    if centres is not None:
        pos = d.stimuli[:, FEATURES.index("position")]
        return np.argmin(np.abs(pos[:, None] - np.asarray(centres)[None]), axis=1)
    names = [Shape.from_code(int(c)).value for c in d.shapes]
    try:
        return np.array([list(classes).index(n) for n in names], dtype=np.int64)
    except ValueError:
        raise ConfigurationError(f"dataset shapes {sorted(set(names))} not in classes "
                                 f"{list(classes)}") from None


def feature_index(features) -> list[int]:
    return [FEATURES.index(f) for f in features]


def evaluate_regression(model: DecoderModel, test: Dataset) -> EvalReport:
    """Errors of ``model`` on ``test`` against the jittered ground truth."""
    if len(test) == 0:
        raise DegenerateInputError("empty test set")
    pred = predict(model, test.images)
    arch = model.arch
    report = EvalReport(features=tuple(arch.regression), classes=tuple(arch.classes),
                        n=len(test))
    if arch.regression:
        truth = test.stimuli[:, feature_index(arch.regression)]
        err = np.abs(pred.values - truth)
        report.mae = err.mean(axis=0)
        report.std = err.std(axis=0)
        report.relative = relative_error(pred.values, truth, model.bounds)
        report.predictions, report.truth = pred.values, truth
    if arch.classes:
        true = class_labels(test, arch.classes)
        guess = np.argmax(pred.probabilities, axis=1)
        report.confusion = confusion_matrix(true, guess, len(arch.classes))
        report.true_labels, report.predicted_labels = true, guess
    return report


def time_inference(model: DecoderModel, images, repeats: int = 20) -> tuple[float, float]:
    """Mean and std wall-clock milliseconds of single-image inference."""
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    times = []
    for r in range(repeats):
        img = images[r % len(images)]
        t0 = time.perf_counter()
        predict(model, img)
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.mean(times)), float(np.std(times))


# -- tables ----------------------------------------------------------------

def format_value(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def table_to_csv(rows: list[dict]) -> str:
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for r in rows:
        w.writerow([format_value(r[k]) if k in r else "" for k in keys])
    return buf.getvalue()


def write_table(rows: list[dict], path) -> None:
    Path(path).write_text(table_to_csv(rows))


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def prediction_rows(report: EvalReport) -> list[dict]:
    rows = []
    for i in range(report.n):
        row = {"index": i}
        if report.predictions is not None:
            for j, f in enumerate(report.features):
                row[f"{f}_true"] = float(report.truth[i, j])
                row[f"{f}_est"] = float(report.predictions[i, j])
        if report.true_labels is not None:
            row["class_true"] = report.classes[report.true_labels[i]]
            row["class_est"] = report.classes[report.predicted_labels[i]]
        rows.append(row)
    return rows


def images_digest(images) -> str:
    return hashlib.sha256(np.ascontiguousarray(images).tobytes()).hexdigest()


# -- experiment plumbing ---------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a train/evaluate cell needs besides the data."""

    train: TrainConfig = TrainConfig(epochs=12)
    seeds: tuple = (0, 1, 2)
    noise: NoiseConfig = NoiseConfig()
    dtype: str = "float32"
    workers: int = 1

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def cell_seeds(seed: int) -> dict:
    """Independent seeds for one experiment cell."""
    return {"train_data": 1000 * seed + 1, "test_data": 1000 * seed + 2,
            "init": seed, "shuffle": seed, "split": 1000 * seed + 3}


def train_model(arch: Architecture, train: Dataset, config: ExperimentConfig, seed: int,
                bounds=None, labels=None, train_config: TrainConfig | None = None,
                callback=None):
    """Build, scale targets and fit; returns ``(model, history)``."""
    s = cell_seeds(seed)
    model = build_decoder(arch, seed=s["init"], dtype=np.dtype(config.dtype))
    targets = None
    if arch.regression:
        idx = feature_index(arch.regression)
        model.bounds = train.bounds(arch.regression) if bounds is None else np.asarray(bounds)
        empty = [f for f, (lo, hi) in zip(arch.regression, model.bounds) if not hi > lo]
        if empty:
            raise DegenerateInputError(f"training range is empty for {', '.join(empty)}")
        targets = model.scale(train.stimuli[:, idx])
    tc = dataclasses.replace(train_config or config.train, shuffle_seed=s["shuffle"])
    history = fit(model, train.images, targets, labels, tc, callback)
    return model, history


def _mean_rows(rows: list[dict], keys) -> dict:
    return {k: float(np.mean([r[k] for r in rows])) for k in keys if k in rows[0]}


def _report_keys(features):
    return [f"{f}_rel_pct" for f in features] + [f"{f}_mae" for f in features] \
        + ["mean_rel_pct", "accuracy"]


def interpolation_protocol(protocol: SweepProtocol) -> SweepProtocol:
    """Interpolation test grid: every axis offset by half an interval."""
    return protocol.half_interval(repeats=1)


def regression_cell(field: MaterialField, protocol: SweepProtocol, config: ExperimentConfig,
                    seed: int, arch: Architecture = Architecture(), test: Dataset | None = None):
    """Generate, train and evaluate one seed on ``protocol``; returns (model, report)."""
    s = cell_seeds(seed)
    train = generate_dataset(field, protocol, config.noise, seed=s["train_data"],
                             workers=config.workers)
    if test is None:
        test = generate_dataset(field, interpolation_protocol(protocol), config.noise,
                                seed=s["test_data"], workers=config.workers)
    model, _ = train_model(arch, train, config, seed)
    return model, evaluate_regression(model, test)


# -- experiments -----------------------------------------------------------

# Dedicated grid for the interval experiment: both spacings tile the same span.
INTERVAL_PROTOCOL = SweepProtocol(depth=Axis(100.0, 12.0, 14), position=Axis(0.0, 120.0, 14),
                                  temperature=Axis(21.8, 0.4, 2), repeats=1)
INTERVAL_SETS = ((12.0, 120.0), (52.0, 520.0))


def experiment_intervals(field: MaterialField, base: SweepProtocol = INTERVAL_PROTOCOL,
                         interval_sets=INTERVAL_SETS,
                         config: ExperimentConfig = ExperimentConfig(train=TrainConfig(epochs=8))
                         ) -> list[dict]:
    """Train at each (depth step, position step) on a common span and sample
    budget; evaluate all on the same fine half-interval test grid."""
    if not interval_sets:
        raise EmptyProtocolError("no interval sets given")
    rows = []
    for dstep, pstep in interval_sets:
        proto = interval_protocol(base, dstep, pstep, n_target=base.total)
        c_depth = measure_correlation(field, "depth", dstep, noise=config.noise)
        c_pos = measure_correlation(field, "position", pstep, noise=config.noise)
        per_seed = []
        for seed in config.seeds:
            s = cell_seeds(seed)
            test = generate_dataset(field, interpolation_protocol(base), config.noise,
                                    seed=s["test_data"], workers=config.workers)
            train = generate_dataset(field, proto, config.noise, seed=s["train_data"],
                                     workers=config.workers)
            # errors are normalised by the common span so rows are comparable
            model, _ = train_model(Architecture(), train, config, seed,
                                   bounds=_protocol_bounds(base))
            per_seed.append(evaluate_regression(model, test).row())
        row = {"depth_step": dstep, "position_step": pstep,
               "C_depth": c_depth, "C_position": c_pos, "n_train": proto.total,
               "grid": f"{proto.depth.count}x{proto.position.count}x{proto.temperature.count}"
                       f"x{proto.repeats}", "seeds": len(config.seeds)}
        row.update(_mean_rows(per_seed, _report_keys(FEATURES)))
        rows.append(row)
    return rows


def _protocol_bounds(protocol: SweepProtocol) -> np.ndarray:
    axes = [protocol.depth, protocol.position, protocol.temperature]
    return np.array([[a.start, a.start + a.step * (a.count - 1)] for a in axes])


def sample_size_subset(full: Dataset, grid_size: int, n: int, seed: int) -> Dataset:
    """``n`` training samples drawn from sequential sweeps in ``full``.

    Whole multiples of the grid take complete sweeps; other sizes take a
    seeded random subset of the sweeps that cover them.
    """
    if n > len(full):
        raise ConfigurationError(f"{n} samples requested from a set of {len(full)}")
    sweeps = math.ceil(n / grid_size)
    if n == sweeps * grid_size:
        return full.subset(np.arange(n))
    rng = np.random.default_rng([cell_seeds(seed)["split"], n])
    return full.subset(np.sort(rng.choice(sweeps * grid_size, size=n, replace=False)))


def experiment_sample_size(field: MaterialField, protocol: SweepProtocol = DESK_PROTOCOL,
                           sizes=None, steps: int = 100,
                           config: ExperimentConfig = ExperimentConfig()) -> list[dict]:
    """Error versus training-set size at a fixed optimiser-step budget.

    Each size trains for ``steps`` mini-batch updates (rounded to whole
    epochs) so the comparison isolates the amount of data.
    """
    nd = protocol.grid_size
    sizes = list(sizes or (nd // 4, nd, 2 * nd))
    if not sizes:
        raise EmptyProtocolError("no sample sizes given")
    bounds = _protocol_bounds(protocol)
    per_size: dict[int, list] = {n: [] for n in sizes}
    for seed in config.seeds:
        s = cell_seeds(seed)
        test = generate_dataset(field, interpolation_protocol(protocol), config.noise,
                                seed=s["test_data"], workers=config.workers)
        full = generate_dataset(field, protocol.replace(repeats=math.ceil(max(sizes) / nd)),
                                config.noise, seed=s["train_data"], workers=config.workers)
        for n in sizes:
            train = sample_size_subset(full, nd, n, seed)
            tc = dataclasses.replace(config.train, epochs=_epochs_for(steps, n, config))
            model, _ = train_model(Architecture(), train, config, seed, bounds=bounds,
                                   train_config=tc)
            per_size[n].append(evaluate_regression(model, test).row())
    rows = []
    for n in sizes:
        row = {"n_train": int(n), "n_over_nd": n / nd, "is_nd": int(n == nd),
               "epochs": _epochs_for(steps, n, config), "seeds": len(config.seeds)}
        row.update(_mean_rows(per_size[n], _report_keys(FEATURES)))
        rows.append(row)
    return rows


def _epochs_for(steps: int, n: int, config: ExperimentConfig) -> int:
    return max(1, round(steps * config.train.batch_size / n))


DRIFT_DAYS = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)


def experiment_drift(field: MaterialField, model: DecoderModel,
                     protocol: SweepProtocol = DESK_PROTOCOL, days=DRIFT_DAYS,
                     rate: float | None = None, config: ExperimentConfig = ExperimentConfig(),
                     test_seed: int | None = None) -> list[dict]:
    """Evaluate a day-0 model on test sets rendered after ``days`` of drift.

    Every day reuses the same creation seed, so stimuli and noise match and
    only the drift phase differs.
    """
    if not len(days):
        raise EmptyProtocolError("no days given")
    seed = cell_seeds(config.seeds[0])["test_data"] if test_seed is None else test_seed
    rows = []
    for day in days:
        drift = DriftConfig(days=float(day), rate=rate)
        test = generate_dataset(field, interpolation_protocol(protocol), config.noise, drift=drift,
                                seed=seed, workers=config.workers)
        row = {"day": float(day)}
        row.update(evaluate_regression(model, test).row())
        rows.append(row)
    return rows


SHAPE_CLASSES = (Shape.CIRCLE, Shape.SQUARE, Shape.TRIANGLE)
SHAPE_PROTOCOL = SweepProtocol(depth=Axis(100.0, 8.0, 15), position=Axis(560.0, 160.0, 1),
                               temperature=Axis(21.6, 0.2, 5), repeats=2,
                               shapes=SHAPE_CLASSES)


def split_indices(n: int, test_fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def experiment_shapes(field: MaterialField, protocol: SweepProtocol = SHAPE_PROTOCOL,
                      test_fraction: float = 0.1,
                      config: ExperimentConfig = ExperimentConfig(train=TrainConfig(epochs=20)),
                      seed: int | None = None) -> tuple[EvalReport, dict]:
    """Joint depth regression and shape classification on a random 90/10 split."""
    if not protocol.shapes:
        raise ConfigurationError("shape experiment needs a protocol with shapes")
    seed = config.seeds[0] if seed is None else seed
    s = cell_seeds(seed)
    data = generate_dataset(field, protocol, config.noise, seed=s["train_data"],
                            workers=config.workers)
    classes = tuple(sh.value for sh in protocol.shapes)
    tr_idx, te_idx = split_indices(len(data), test_fraction, s["split"])
    train, test = data.subset(tr_idx), data.subset(te_idx)
    arch = Architecture(regression=("depth",), classes=classes)
    model, _ = train_model(arch, train, config, seed, labels=class_labels(train, classes))
    report = evaluate_regression(model, test)
    train_report = evaluate_regression(model, train)
    info = {"n_train": len(train), "n_test": len(test), "accuracy": report.accuracy,
            "train_accuracy": train_report.accuracy,
            "depth_rel_pct": float(report.relative[0])}
    return report, info


INTERFACE_CLASSES = ("L1", "R1", "L2", "R2")
INTERFACE_CENTRES = (-4500.0, -1500.0, 1500.0, 4500.0)     # um along the press axis


def interface_protocol(centres=INTERFACE_CENTRES, repeats: int = 4, offset: float = 0.0,
                       temperature: float = 22.0) -> list:
    """Shallow presses at fixed centres, 20 depths from 20 um in 1.5 um steps
    per centre, at a steady temperature.  ``offset`` shifts every depth, e.g. by
    half a step for a test set between the training depths."""
    from .optics import Stimulus
    depths = 20.0 + 1.5 * np.arange(20) + offset
    grid = [Stimulus(float(d), float(c), temperature) for c in centres for d in depths]
    return grid * repeats


def interface_field(field_or_config) -> MaterialField:
    cfg = field_or_config.config if isinstance(field_or_config, MaterialField) else field_or_config
    return build_material(cfg.interface().replace(indenter_radius=4.0))


def experiment_interface(field: MaterialField, centres=INTERFACE_CENTRES,
                         classes=INTERFACE_CLASSES, n_train_repeats: int = 4,
                         config: ExperimentConfig = ExperimentConfig(train=TrainConfig(epochs=10)),
                         seed: int | None = None) -> tuple[EvalReport, dict]:
    """Position classification on an interface-mode field with a classifier-only
    decoder: 320 training presses and an independently jittered test set."""
    if len(centres) != len(classes):
        raise ConfigurationError("one centre per class required")
    seed = config.seeds[0] if seed is None else seed
    s = cell_seeds(seed)
    proto = SweepProtocol(repeats=1)

    def make(grid, data_seed):
        # touch presses happen at room temperature: depth jitter only
        d = generate_dataset(field, proto, config.noise, seed=data_seed, stimuli=grid,
                             jitter=(DEPTH_JITTER, 0.0), workers=config.workers)
        d.metadata["class_positions"] = list(map(float, centres))
        d.metadata["classes"] = list(classes)
        return d

    train = make(interface_protocol(centres, n_train_repeats), s["train_data"])
    test = make(interface_protocol(centres, 1, offset=0.75), s["test_data"])
    arch = Architecture(regression=(), classes=tuple(classes))
    model, _ = train_model(arch, train, config, seed, labels=class_labels(train, classes))
    report = evaluate_regression(model, test)
    info = {"n_train": len(train), "n_test": len(test), "accuracy": report.accuracy,
            "train_accuracy": evaluate_regression(model, train).accuracy}
    return report, info


def effective_crop(grid_size: int, fraction: float, crop: int) -> int:
    """Largest multiple of 4 not above ``crop`` that fits the downsampled image."""
    k = max(1, int(round(1.0 / fraction)))
    return min(crop, (grid_size // k) // 4 * 4)


def experiment_resize(field: MaterialField, protocol: SweepProtocol = DESK_PROTOCOL,
                      fractions=(0.1, 0.3, 1.0), crops=(64,),
                      config: ExperimentConfig = ExperimentConfig()) -> list[dict]:
    """Train and evaluate across downsampling fractions and crop sizes."""
    if not fractions or not crops:
        raise EmptyProtocolError("need at least one fraction and one crop")
    rows = []
    bounds = _protocol_bounds(protocol)
    for fraction in fractions:
        for crop in crops:
            size = effective_crop(field.config.grid_size, fraction, crop)
            arch = Architecture(input_size=size)
            per_seed = []
            for seed in config.seeds:
                s = cell_seeds(seed)
                kw = dict(noise=config.noise, fraction=fraction, crop=size,
                          workers=config.workers)
                train = generate_dataset(field, protocol, seed=s["train_data"], **kw)
                test = generate_dataset(field, interpolation_protocol(protocol), seed=s["test_data"], **kw)
                model, _ = train_model(arch, train, config, seed, bounds=bounds)
                per_seed.append(evaluate_regression(model, test).row())
            row = {"fraction": fraction, "crop": crop, "effective_crop": size,
                   "seeds": len(config.seeds)}
            row.update(_mean_rows(per_seed, _report_keys(FEATURES)))
            rows.append(row)
    return rows
