"""Layers with explicit forward and backward passes.

Images are NHWC arrays.  Convolution kernels are stored HWIO,
``(k, k, in_channels, out_channels)``, so the im2col matrix multiplies them
without a transpose.  Every layer caches what its backward pass needs during
``forward`` and exposes ``params``/``grads`` dictionaries keyed by name.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InferenceModeError, ShapeError


def init_limit(fan_in: int) -> float:
    """Half-width of the uniform weight initialisation, ``1/sqrt(fan_in)``.

    The He bound ``sqrt(6/fan_in)`` is 2.4x wider; with it the decoder starts
    with outputs in the tens and settles on solutions that memorise the
    training grid instead of interpolating between its points.
    """
    return 1.0 / np.sqrt(fan_in)


class Layer:
    params: dict
    grads: dict
    state: dict = {}

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


def im2col(xp, k, h, w):
    """Stack the ``k*k`` shifted views of a padded NHWC batch.

    Returns ``(B*h*w, k*k*C)`` ordered (row offset, column offset, channel) to
    match an HWIO kernel reshaped to ``(k*k*C, O)``.
    """
    b, _, _, c = xp.shape
    if c == 1:
        return sliding_window_view(xp[..., 0], (k, k), axis=(1, 2)).reshape(b * h * w, k * k)
    cols = np.empty((b, h, w, k * k, c), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i * k + j, :] = xp[:, i:i + h, j:j + w, :]
    return cols.reshape(b * h * w, k * k * c)


def col2im(dcols, shape, k, h, w):
    """Adjoint of :func:`im2col`: scatter-add columns back onto a padded batch."""
    b, hp, wp, c = shape
    dcols = dcols.reshape(b, h, w, k * k, c)
    dxp = np.zeros(shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i * k + j, :]
    return dxp


def conv2d_forward(x, kernels, bias):
    """Cross-correlation with zero 'same' padding (odd kernel size)."""
    k, k2, cin, cout = kernels.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError("kernels must be square with odd size")
    if x.ndim != 4 or x.shape[3] != cin:
        raise ShapeError(f"input {x.shape} does not match kernels {kernels.shape}")
    if bias.shape != (cout,):
        raise ShapeError("bias length must equal output channels")
    b, h, w, _ = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = im2col(xp, k, h, w)
    out = cols @ kernels.reshape(k * k * cin, cout) + bias
    return out.reshape(b, h, w, cout), (cols, xp.shape)


def conv2d_backward(dout, kernels, cache, input_grad=True):
    """Gradients w.r.t. input (None unless ``input_grad``), kernels and bias."""
    cols, padded_shape = cache
    k, _, cin, cout = kernels.shape
    b, h, w, _ = dout.shape
    d2 = dout.reshape(b * h * w, cout)
    dk = (cols.T @ d2).reshape(kernels.shape)
    db = d2.sum(axis=0)
    if not input_grad:
        return None, dk, db
    dcols = d2 @ kernels.reshape(k * k * cin, cout).T
    dxp = col2im(dcols, padded_shape, k, h, w)
    p = k // 2
    return dxp[:, p:p + h, p:p + w, :], dk, db


class Conv2D(Layer):
    """'Same' convolution.  ``input_grad=False`` skips the input gradient (first layer)."""

    def __init__(self, cin, cout, k, rng=None, dtype=np.float64, input_grad=True):
        self.input_grad = input_grad
        limit = init_limit(cin * k * k)
        if rng is None:
            kern = np.zeros((k, k, cin, cout), dtype=dtype)
        else:
            kern = rng.uniform(-limit, limit, (k, k, cin, cout)).astype(dtype)
        self.params = {"kernel": kern, "bias": np.zeros(cout, dtype=dtype)}
        self.grads = {}
        self.zero_grad()

    def forward(self, x, train=True):
        out, self._cache = conv2d_forward(x, self.params["kernel"], self.params["bias"])
        return out

    def backward(self, dout):
        dx, dk, db = conv2d_backward(dout, self.params["kernel"], self._cache,
                                     self.input_grad)
        self.grads["kernel"] += dk
        self.grads["bias"] += db
        self._cache = None
        return dx


class ReLU(Layer):
    def __init__(self):
        self.params, self.grads = {}, {}

    def forward(self, x, train=True):
        self._mask = x > 0
        return np.maximum(x, 0, dtype=x.dtype)

    def backward(self, dout):
        return dout * self._mask


class BatchNorm(Layer):
    """Per-channel normalisation over every axis but the last.

    ``momentum`` weights the old running value:
    ``running = momentum * running + (1 - momentum) * batch``.
    """

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float64):
        self.momentum = momentum
        self.eps = eps
        self.params = {"gamma": np.ones(channels, dtype=dtype),
                       "beta": np.zeros(channels, dtype=dtype)}
        self.grads = {}
        self.state = {"running_mean": np.zeros(channels, dtype=dtype),
                      "running_var": np.ones(channels, dtype=dtype),
                      "batches": np.zeros(1, dtype=dtype)}
        self.zero_grad()

    def forward(self, x, train=True):
        c = x.shape[-1]
        x2 = x.reshape(-1, c)
        if train:
            if x.shape[0] < 2:
                raise ShapeError("batch normalisation in training mode needs batch >= 2")
            mean = x2.mean(axis=0)
            centered = x2 - mean
            var = np.mean(centered * centered, axis=0)
            m = self.momentum
            self.state["running_mean"] = m * self.state["running_mean"] + (1 - m) * mean
            self.state["running_var"] = m * self.state["running_var"] + (1 - m) * var
            self.state["batches"] = self.state["batches"] + 1
        else:
            if self.state["batches"][0] == 0:
                raise InferenceModeError("batch-norm running statistics were never estimated")
            centered = x2 - self.state["running_mean"]
            var = self.state["running_var"]
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = centered * inv_std
        self._cache = (xhat, inv_std)
        out = xhat * self.params["gamma"] + self.params["beta"]
        return out.reshape(x.shape)

    def backward(self, dout):
        # training-mode gradient; inference mode is never differentiated
        xhat, inv_std = self._cache
        d2 = dout.reshape(xhat.shape)
        n = d2.shape[0]
        dbeta = d2.sum(axis=0)
        dgamma = (d2 * xhat).sum(axis=0)
        self.grads["gamma"] += dgamma
        self.grads["beta"] += dbeta
        gamma = self.params["gamma"]
        dx = (d2 - (dbeta / n + xhat * (dgamma / n))) * (gamma * inv_std)
        self._cache = None
        return dx.reshape(dout.shape)


class MaxPool2(Layer):
    """2x2 max pooling, stride 2; ties resolve to the first window position
    in row-major order."""

    def __init__(self):
        self.params, self.grads = {}, {}

    def forward(self, x, train=True):
        h, w = x.shape[1:3]
        if h % 2 or w % 2:
            raise ShapeError(f"max pooling needs even spatial dims, got {h}x{w}")
        corners = [x[:, i::2, j::2] for i in (0, 1) for j in (0, 1)]
        out = np.maximum(np.maximum(corners[0], corners[1]),
                         np.maximum(corners[2], corners[3]))
        taken = np.zeros(out.shape, dtype=bool)
        masks = []
        for corner in corners:
            hit = (corner == out) & ~taken
            taken |= hit
            masks.append(hit)
        self._cache = (masks, x.shape)
        return out

    def backward(self, dout):
        masks, shape = self._cache
        dx = np.empty(shape, dtype=dout.dtype)
        for (i, j), mask in zip(((0, 0), (0, 1), (1, 0), (1, 1)), masks):
            dx[:, i::2, j::2] = dout * mask
        self._cache = None
        return dx


class Flatten(Layer):
    def __init__(self):
        self.params, self.grads = {}, {}

    def forward(self, x, train=True):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Dense(Layer):
    def __init__(self, n_in, n_out, rng=None, dtype=np.float64):
        limit = init_limit(n_in)
        if rng is None:
            weight = np.zeros((n_in, n_out), dtype=dtype)
        else:
            weight = rng.uniform(-limit, limit, (n_in, n_out)).astype(dtype)
        self.params = {"weight": weight, "bias": np.zeros(n_out, dtype=dtype)}
        self.grads = {}
        self.zero_grad()

    def forward(self, x, train=True):
        if x.ndim != 2 or x.shape[1] != self.params["weight"].shape[0]:
            raise ShapeError(f"dense input {x.shape} vs weight {self.params['weight'].shape}")
        self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dout):
        self.grads["weight"] += self._x.T @ dout
        self.grads["bias"] += dout.sum(axis=0)
        dx = dout @ self.params["weight"].T
        self._x = None
        return dx


class Sequential(Layer):
    def __init__(self, *layers):
        self.layers = list(layers)

    @property
    def params(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers)
                for k, v in layer.params.items()}

    @property
    def grads(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers)
                for k, v in layer.grads.items()}

    @property
    def state(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers)
                for k, v in layer.state.items()}

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def mse(pred, target):
    """Per-sample squared error summed over outputs, averaged over the batch."""
    diff = pred - target
    n = pred.shape[0]
    return float(np.sum(diff * diff) / n), 2.0 * diff / n
