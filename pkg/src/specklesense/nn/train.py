"""Mini-batch training with Adam, and inference."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ..errors import DegenerateInputError, DivergenceError, ShapeError
from .layers import cross_entropy, mse, softmax
from .model import DecoderModel


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 60
    mse_weight: float = 1.0
    ce_weight: float = 1.0
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


class Adam:
    """Adam with bias correction; ``eps`` is added outside the square root."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # batch norm cannot train on a single sample; fold a lone remainder back in
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        lone = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], lone])
    return chunks


def loss_and_grads(model: DecoderModel, images, targets=None, labels=None,
                   mse_weight=1.0, ce_weight=1.0, train=True):
    """Forward, weighted joint loss, backward.  Returns ``(total, mse, ce)``.

    Gradients accumulate into the model's ``grads``; call ``zero_grad`` first.
    """
    reg, logits = model.forward(images, train=train)
    total = mse_val = ce_val = 0.0
    dreg = dlogits = None
    if reg is not None and targets is not None:
        mse_val, dreg = mse(reg, np.asarray(targets, dtype=reg.dtype))
        total += mse_weight * mse_val
        dreg = (mse_weight * dreg).astype(reg.dtype)
    if logits is not None and labels is not None:
        ce_val, dlogits = cross_entropy(logits, np.asarray(labels))
        total += ce_weight * ce_val
        dlogits = (ce_weight * dlogits).astype(logits.dtype)
    model.backward(dreg, dlogits)
    return total, mse_val, ce_val


class EpochLoss(NamedTuple):
    epoch: int
    loss: float
    mse: float
    ce: float


def fit(model: DecoderModel, images, targets=None, labels=None,
        config: TrainConfig = TrainConfig(), callback=None) -> list[EpochLoss]:
    """Train on already-scaled targets; returns the per-epoch mean losses."""
    images = np.asarray(images, dtype=model.dtype)
    n = images.shape[0]
    if n == 0:
        raise DegenerateInputError("empty training set")
    if targets is not None:
        targets = np.asarray(targets, dtype=model.dtype).reshape(n, -1)
        if targets.shape[1] != model.n_regression:
            raise ShapeError(f"{targets.shape[1]} targets for {model.n_regression} outputs")
    params = model.parameters()
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.shuffle_seed)
    history = []
    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(3)
        for idx in _batches(n, config.batch_size, rng):
            model.zero_grad()
            parts = loss_and_grads(
                model, images[idx],
                None if targets is None else targets[idx],
                None if labels is None else labels[idx],
                config.mse_weight, config.ce_weight)
            if not np.isfinite(parts[0]):
                raise DivergenceError(epoch, parts[0])
            opt.step(model.gradients())
            sums += np.array(parts) * len(idx)
        record = EpochLoss(epoch, *(sums / n))
        history.append(record)
        if callback is not None:
            callback(record)
    return history


class Prediction(NamedTuple):
    values: np.ndarray | None          # physical units, (B, R)
    scaled: np.ndarray | None          # network outputs, (B, R)
    probabilities: np.ndarray | None   # (B, K)


def predict(model: DecoderModel, images) -> Prediction:
    """Inference-mode forward pass, one image at a time.

    Running each image alone makes a result independent of whatever else is
    in the batch, bit for bit.
    """
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    scaled, probs = [], []
    for img in images:
        reg, logits = model.forward(img[None], train=False)
        if reg is not None:
            scaled.append(reg[0])
        if logits is not None:
            probs.append(softmax(logits.astype(np.float64))[0])
    scaled = np.array(scaled, dtype=float) if scaled else None
    values = None
    if scaled is not None and model.bounds is not None:
        values = model.unscale(scaled)
    return Prediction(values, scaled, np.array(probs) if probs else None)
