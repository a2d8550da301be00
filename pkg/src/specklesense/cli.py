"""Command-line entry point: ``specklesense <subcommand> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 data or format
error, 4 numeric failure (divergence, calibration miss).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__, plotting
from .baseline import compare_models
from .calibration import DEFAULT_TARGETS, calibrate_sensitivity
from .dataset import (DriftConfig, generate_dataset, load_dataset, preprocess, render_raw,
                      save_dataset, sweep_grid)
from .errors import ConfigurationError, FormatError, SpeckleError
from .evaluation import (DRIFT_DAYS, INTERVAL_PROTOCOL, SHAPE_PROTOCOL, ExperimentConfig,
                         evaluate_regression, experiment_drift,
                         experiment_interface, experiment_intervals, experiment_resize,
                         experiment_sample_size, experiment_shapes, interface_field,
                         interpolation_protocol, prediction_rows, time_inference,
                         train_model, write_table)
from .nn import Architecture, load_model, predict, save_model
from .optics import MaterialConfig, build_material, read_pgm, write_pgm
from .settings import PRESETS, Settings, load_settings, preset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# -- run context -----------------------------------------------------------

class Run:
    """Resolved settings plus output bookkeeping for one subcommand."""

    def __init__(self, args, settings: Settings):
        self.args = args
        self.settings = settings
        self.out = Path(args.out)
        self.written: list[Path] = []
        self.inputs: dict[str, str] = {}

    def path(self, name: str) -> Path:
        p = self.out / name
        if p.exists() and not self.args.force:
            raise UsageError(f"{p} exists; pass --force to overwrite")
        self.written.append(p)
        return p

    def claim(self, *names):
        """Check every output up front so a refused run writes nothing."""
        return [self.path(n) for n in names]

    def read_input(self, label: str, path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"{label} not found: {p}")
        self.inputs[label] = f"{p} sha256:{hashlib.sha256(p.read_bytes()).hexdigest()}"
        return p

    @property
    def experiment(self) -> ExperimentConfig:
        s = self.settings
        return ExperimentConfig(train=s.train, seeds=s.seeds, noise=s.noise, dtype=s.dtype,
                                workers=self.args.threads)

    def field(self):
        return build_material(self.settings.material)

    def manifest(self):
        a = self.args
        data = {
            "command": a.command,
            "argv": a.argv,
            "settings": self.settings.to_dict(),
            "seed": a.seed,
            "reproducible": bool(a.reproducible),
            "threads": a.threads,
            "inputs": self.inputs,
            "outputs": sorted(p.name for p in self.written),
            "versions": {"specklesense": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
        }
        if not a.reproducible:
            data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        (self.out / f"manifest-{a.command}.json").write_text(
            json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")


# -- subcommands -----------------------------------------------------------

def cmd_calibrate(run: Run):
    cfg_path, csv_path = run.claim("material.cfg", "calibration.csv")
    config, achieved = calibrate_sensitivity(run.settings.material, DEFAULT_TARGETS,
                                             noise=run.settings.noise, return_report=True)
    config.save(cfg_path)
    rows = [{"axis": t.axis, "delta": t.delta, "target": t.correlation, "measured": c}
            for t, c in achieved.items()]
    write_table(rows, csv_path)
    print(f"deform_gain = {config.deform_gain!r}\nthermal_gain = {config.thermal_gain!r}")
    for r in rows:
        print(f"C({r['axis']} +{r['delta']:g}) = {r['measured']:.3f} (target {r['target']})")


def _material(run: Run) -> MaterialConfig:
    if run.args.material:
        return MaterialConfig.load(run.read_input("material", run.args.material))
    return run.settings.material


def cmd_gen(run: Run):
    a, s = run.args, run.settings
    out = run.claim(a.name)[0]
    pgm = run.path(Path(a.name).stem + "-first.pgm")
    field = build_material(_material(run))
    protocol = s.protocol if a.split == "train" else interpolation_protocol(s.protocol)
    drift = DriftConfig(days=a.drift_days) if a.drift_days else None
    seed = a.seed if a.seed is not None else (1 if a.split == "train" else 2)
    d = generate_dataset(field, protocol, s.noise, drift=drift, seed=seed,
                         fraction=s.downsample_fraction, crop=s.crop, workers=a.threads)
    d.metadata["split"] = a.split
    save_dataset(d, out)
    first, _ = render_raw(field, sweep_grid(protocol)[0], seed, 0, s.noise,
                          drift.phase(field) if drift else None)
    write_pgm(pgm, first)
    print(f"wrote {len(d)} samples ({d.side}x{d.side}) to {out}")


def cmd_train(run: Run):
    a = run.args
    data = load_dataset(run.read_input("dataset", a.data))
    model_path, loss_csv, loss_png = run.claim(a.name, "loss.csv", "loss.png")
    if a.arch == "linear":
        arch = Architecture(kind="linear", input_size=data.side)
    else:
        arch = Architecture(input_size=data.side)
    seed = a.seed if a.seed is not None else 0
    t0 = time.perf_counter()

    def progress(rec):
        print(f"epoch {rec.epoch:3d}  loss {rec.loss:.6f}  ({time.perf_counter() - t0:.0f} s)",
              flush=True)

    model, history = train_model(arch, data, run.experiment, seed, callback=progress)
    save_model(model, model_path)
    write_table([h._asdict() for h in history], loss_csv)
    plotting.plot_loss(history, loss_png)
    print(f"wrote {model_path}")


def cmd_eval(run: Run):
    a = run.args
    model = load_model(run.read_input("model", a.model))
    data = load_dataset(run.read_input("dataset", a.data))
    names = ["report.csv", "report.txt", "predictions.csv", "predictions.png"]
    if model.arch.classes:
        names.append("confusion.png")
    paths = dict(zip(names, run.claim(*names)))
    report = evaluate_regression(model, data)
    write_table([report.row()], paths["report.csv"])
    paths["report.txt"].write_text(report.summary() + "\n")
    write_table(prediction_rows(report), paths["predictions.csv"])
    if model.arch.regression:
        plotting.plot_predictions(report, paths["predictions.png"])
    else:
        paths["predictions.png"].unlink(missing_ok=True)
        run.written.remove(paths["predictions.png"])
    if model.arch.classes:
        plotting.plot_confusion(report, paths["confusion.png"])
    print(report.summary())


def load_image_file(path, input_size: int, s: Settings) -> np.ndarray:
    """Camera frame (PGM) or preprocessed array (.npy) to a model input."""
    p = Path(path)
    if p.suffix == ".npy":
        img = np.load(p)
        if img.shape != (input_size, input_size):
            raise FormatError(f"{p}: expected a {input_size}x{input_size} array")
        return img
    return preprocess(read_pgm(p), s.downsample_fraction, input_size)


def cmd_infer(run: Run):
    a, s = run.args, run.settings
    model = load_model(run.read_input("model", a.model))
    out_csv = run.claim("infer.csv")[0]
    images = np.stack([load_image_file(run.read_input(f"image{i}", p), model.arch.input_size, s)
                       for i, p in enumerate(a.images)])
    pred = predict(model, images)
    rows = []
    for i, path in enumerate(a.images):
        row = {"image": path}
        if pred.values is not None:
            row.update({f: float(v) for f, v in zip(model.arch.regression, pred.values[i])})
        if pred.probabilities is not None:
            row["class"] = model.arch.classes[int(np.argmax(pred.probabilities[i]))]
        rows.append(row)
        print(", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                        for k, v in row.items()))
    write_table(rows, out_csv)
    if a.time:
        mean, std = time_inference(model, images, a.repeats)
        print(f"inference latency: {mean:.2f} +- {std:.2f} ms over {a.repeats} runs")


def cmd_compare(run: Run):
    a, s = run.args, run.settings
    csv_path, png = run.claim("compare.csv", "compare.png")
    if a.train and a.test:
        train = load_dataset(run.read_input("train", a.train))
        test = load_dataset(run.read_input("test", a.test))
    else:
        field = run.field()
        train = generate_dataset(field, s.protocol, s.noise, seed=1, workers=a.threads)
        test = generate_dataset(field, interpolation_protocol(s.protocol), s.noise, seed=2,
                                workers=a.threads)
    rows = compare_models(train, test, run.experiment)
    write_table(rows, csv_path)
    plotting.plot_comparison(rows, png)
    for r in rows:
        if r["seed"] == "mean":
            print(f"{r['model']:>6}: mean relative error {r['mean_rel_pct']:.3f} %")


def cmd_exp_intervals(run: Run):
    csv_path, png = run.claim("intervals.csv", "intervals.png")
    rows = experiment_intervals(run.field(), INTERVAL_PROTOCOL, config=run.experiment)
    write_table(rows, csv_path)
    plotting.plot_series(rows, "depth_step", png, "depth interval (um)")
    _print_rows(rows)


def cmd_exp_samples(run: Run):
    csv_path, png = run.claim("samples.csv", "samples.png")
    s = run.settings
    nd = s.protocol.grid_size
    sizes = [int(v) for v in run.args.sizes] if run.args.sizes else [nd // 4, nd, 2 * nd]
    rows = experiment_sample_size(run.field(), s.protocol, sizes, run.args.steps,
                                  run.experiment)
    write_table(rows, csv_path)
    plotting.plot_series(rows, "n_train", png, f"training samples (N_d = {nd})", logx=True)
    _print_rows(rows)


def cmd_exp_drift(run: Run):
    a, s = run.args, run.settings
    csv_path, png = run.claim("drift.csv", "drift.png")
    field = run.field()
    if a.model:
        model = load_model(run.read_input("model", a.model))
    else:
        train = generate_dataset(field, s.protocol, s.noise, seed=1, workers=a.threads)
        model, _ = train_model(Architecture(), train, run.experiment, s.seeds[0])
    days = [float(d) for d in a.days] if a.days else DRIFT_DAYS
    rows = experiment_drift(field, model, s.protocol, days, config=run.experiment)
    write_table(rows, csv_path)
    plotting.plot_series(rows, "day", png, "elapsed days")
    _print_rows(rows)


def cmd_exp_shapes(run: Run):
    csv_path, txt, png = run.claim("shapes.csv", "shapes.txt", "shapes-confusion.png")
    report, info = experiment_shapes(run.field(), SHAPE_PROTOCOL, config=run.experiment)
    write_table([{**info, **report.row()}], csv_path)
    txt.write_text(report.summary() + "\n")
    plotting.plot_confusion(report, png)
    print(report.summary())


def cmd_exp_interface(run: Run):
    csv_path, txt, png = run.claim("interface.csv", "interface.txt", "interface-confusion.png")
    report, info = experiment_interface(interface_field(run.settings.material),
                                        config=run.experiment)
    write_table([{**info, **report.row()}], csv_path)
    txt.write_text(report.summary() + "\n")
    plotting.plot_confusion(report, png)
    print(report.summary())


def cmd_exp_resize(run: Run):
    a = run.args
    csv_path, png = run.claim("resize.csv", "resize.png")
    fractions = [float(f) for f in a.fractions] if a.fractions else (0.1, 0.3, 1.0)
    crops = [int(c) for c in a.crops] if a.crops else (64,)
    rows = experiment_resize(run.field(), run.settings.protocol, fractions, crops,
                             run.experiment)
    write_table(rows, csv_path)
    plotting.plot_series(rows, "fraction", png, "downsampling fraction", logx=True)
    _print_rows(rows)


def _print_rows(rows):
    for r in rows:
        print(", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                        for k, v in r.items()))


COMMANDS = {
    "calibrate": (cmd_calibrate, "fit deformation and thermal gains to correlation targets"),
    "gen": (cmd_gen, "render a dataset file"),
    "train": (cmd_train, "train a decoder on a dataset file"),
    "eval": (cmd_eval, "evaluate a model on a dataset file"),
    "infer": (cmd_infer, "estimate stimuli from image files"),
    "exp-intervals": (cmd_exp_intervals, "error versus training interval"),
    "exp-samples": (cmd_exp_samples, "error versus training-set size"),
    "exp-drift": (cmd_exp_drift, "error of a fixed model over simulated days of drift"),
    "exp-shapes": (cmd_exp_shapes, "joint indenter-shape and depth estimation"),
    "exp-interface": (cmd_exp_interface, "press-position classification on an interface"),
    "exp-resize": (cmd_exp_resize, "error versus downsampling and crop"),
    "compare": (cmd_compare, "CNN decoder against the linear baseline"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key-value config file (section.key = value)")
    common.add_argument("--out", default=".", help="output directory (created if absent)")
    common.add_argument("--seed", type=int, help="creation/initialisation seed")
    common.add_argument("--preset", choices=PRESETS, help="parameter bundle (default desk)")
    common.add_argument("--reproducible", action="store_true",
                        help="single-threaded BLAS and no timestamps, for byte-identical output")
    common.add_argument("--threads", type=int, default=1, help="worker threads")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--epochs", type=int, help="override training epochs")

    parser = argparse.ArgumentParser(prog="specklesense", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    subs = {name: sub.add_parser(name, parents=[common], help=text, description=text)
            for name, (_, text) in COMMANDS.items()}
    subs["gen"].add_argument("--split", choices=("train", "test"), default="train",
                             help="test uses the half-interval grid")
    subs["gen"].add_argument("--name", default="dataset.spkl")
    subs["gen"].add_argument("--material", help="material config file from calibrate")
    subs["gen"].add_argument("--drift-days", type=float, default=0.0)
    subs["train"].add_argument("--data", required=True)
    subs["train"].add_argument("--arch", choices=("cnn", "linear"), default="cnn")
    subs["train"].add_argument("--name", default="model.spkm")
    subs["eval"].add_argument("--model", required=True)
    subs["eval"].add_argument("--data", required=True)
    subs["infer"].add_argument("--model", required=True)
    subs["infer"].add_argument("images", nargs="+", help="PGM camera frames or .npy arrays")
    subs["infer"].add_argument("--time", action="store_true", help="report latency")
    subs["infer"].add_argument("--repeats", type=int, default=20)
    subs["compare"].add_argument("--train")
    subs["compare"].add_argument("--test")
    subs["exp-samples"].add_argument("--sizes", nargs="+")
    subs["exp-samples"].add_argument("--steps", type=int, default=100,
                                     help="optimiser steps per training run")
    subs["exp-drift"].add_argument("--model")
    subs["exp-drift"].add_argument("--days", nargs="+")
    subs["exp-resize"].add_argument("--fractions", nargs="+")
    subs["exp-resize"].add_argument("--crops", nargs="+")
    return parser


def resolve_settings(args) -> Settings:
    s = load_settings(args.config, args.preset) if args.config else preset(args.preset or "desk")
    if args.epochs is not None:
        s = s.replace(train=dataclasses.replace(s.train, epochs=args.epochs))
    if args.seed is not None and args.command in ("calibrate",):
        s = s.replace(material=s.material.replace(seed=args.seed))
    return s


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    args.argv = argv
    try:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if args.config and not Path(args.config).is_file():
            raise FileNotFoundError(f"config file not found: {args.config}")
        settings = resolve_settings(args)
        run = Run(args, settings)
        run.out.mkdir(parents=True, exist_ok=True)
        blas = 1 if args.reproducible else args.threads
        with threadpool_limits(limits=blas):
            COMMANDS[args.command][0](run)
        run.manifest()
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SpeckleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
