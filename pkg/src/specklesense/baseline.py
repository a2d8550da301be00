"""Linear-regression baseline compared against the CNN decoder."""

from __future__ import annotations

import numpy as np

from .dataset import Dataset
from .errors import ShapeError
from .evaluation import (ExperimentConfig, evaluate_regression, feature_index, images_digest,
                         train_model)
from .nn import Architecture, DecoderModel
from .optics import FEATURES


def linear_architecture(input_size: int = 64, regression=FEATURES) -> Architecture:
    return Architecture(kind="linear", input_size=input_size, regression=tuple(regression))


def lstsq_fit(images, targets) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form least squares ``targets ~ flatten(images) @ W + b``.

    Minimum-norm solution when under-determined; used as an oracle for the
    Adam-trained baseline.
    """
    if len(images) != len(targets):
        raise ShapeError("images and targets disagree on sample count")
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    y = np.asarray(targets, dtype=np.float64).reshape(len(images), -1)
    design = np.hstack([x, np.ones((x.shape[0], 1))])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return coef[:-1], coef[-1]


def lstsq_model(train: Dataset, regression=FEATURES) -> DecoderModel:
    """Linear baseline with closed-form weights on min-max scaled targets."""
    model = DecoderModel(linear_architecture(train.side, regression), seed=None)
    model.bounds = train.bounds(regression)
    w, b = lstsq_fit(train.images, model.scale(train.stimuli[:, feature_index(regression)]))
    layer = model.heads[0].layers[0]
    layer.params["weight"][...] = w
    layer.params["bias"][...] = b
    return model


def compare_models(train: Dataset, test: Dataset,
                   config: ExperimentConfig = ExperimentConfig(),
                   regression=FEATURES) -> list[dict]:
    """Train the CNN decoder and the linear baseline on identical data and
    seeds; one row per (model, seed) plus a mean row per model."""
    arch = {"cnn": Architecture(input_size=train.side, regression=tuple(regression)),
            "linear": linear_architecture(train.side, regression)}
    digest = images_digest(train.images)
    bounds = train.bounds(regression)
    rows = []
    for name, a in arch.items():
        per_seed = []
        for seed in config.seeds:
            model, history = train_model(a, train, config, seed, bounds=bounds)
            # recorded per run so callers can check both models saw the same bytes
            row = {"model": name, "seed": seed, "train_digest": images_digest(train.images)[:16],
                   "final_loss": history[-1].loss if history else float("nan")}
            row.update(evaluate_regression(model, test).row())
            per_seed.append(row)
        rows += per_seed
        mean = {"model": name, "seed": "mean", "train_digest": digest[:16]}
        for key in per_seed[0]:
            if key.endswith(("_rel_pct", "_mae", "_std")) or key in ("final_loss",):
                mean[key] = float(np.mean([r[key] for r in per_seed]))
        rows.append(mean)
    return rows
