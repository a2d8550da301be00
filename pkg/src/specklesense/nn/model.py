"""Decoder networks and the model checkpoint format.

The CNN decoder is a shared feature extractor::

    conv5x5(32) -> ReLU -> BN -> maxpool2
    conv5x5(64) -> ReLU -> BN -> maxpool2 -> flatten -> FC(500) -> ReLU

followed by one FC branch ``500 -> 200 -> 100 -> 1`` per regressed feature and
an optional classifier branch ``500 -> 200 -> 100 -> K``.  The linear baseline
maps the flattened image straight onto the regression outputs.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import (BadMagicError, ChecksumError, ConfigurationError, FormatError,
                      ShapeError, TruncatedError, VersionMismatchError)
from ..optics import FEATURES
from .layers import (BatchNorm, Conv2D, Dense, Flatten, MaxPool2, ReLU, Sequential,
                     softmax)


@dataclass(frozen=True)
class Architecture:
    kind: str = "cnn"                       # "cnn" or "linear"
    input_size: int = 64
    regression: tuple = FEATURES
    classes: tuple = ()
    conv_channels: tuple = (32, 64)
    kernel_size: int = 5
    shared_units: int = 500
    branch_units: tuple = (200, 100)
    bn_momentum: float = 0.9

    def __post_init__(self):
        for name in ("regression", "classes", "conv_channels", "branch_units"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.kind not in ("cnn", "linear"):
            raise ConfigurationError(f"unknown architecture kind {self.kind!r}")
        if not self.regression and not self.classes:
            raise ConfigurationError("model needs regression outputs or classes")
        if self.kind == "linear" and self.classes:
            raise ConfigurationError("the linear baseline has no classifier")
        if len(self.classes) == 1:
            raise ConfigurationError("a classifier needs at least two classes")
        if self.input_size < 4 or self.input_size % 4:
            raise ConfigurationError("input size must be a positive multiple of 4 "
                                     "(two 2x2 pooling stages)")
        if self.kind == "cnn" and (len(self.conv_channels) != 2 or self.kernel_size % 2 == 0):
            raise ConfigurationError("extractor is two conv stages with odd kernels")

    @property
    def flat_features(self) -> int:
        if self.kind == "linear":
            return self.input_size**2
        return (self.input_size // 4) ** 2 * self.conv_channels[-1]

    def parameter_count(self) -> int:
        """Closed-form count of trainable scalars (running statistics excluded)."""
        if self.kind == "linear":
            return self.flat_features * len(self.regression) + len(self.regression)
        k = self.kernel_size
        c1, c2 = self.conv_channels
        total = (k * k * 1 * c1 + c1) + 2 * c1 + (k * k * c1 * c2 + c2) + 2 * c2
        total += self.flat_features * self.shared_units + self.shared_units

        def branch(n_out):
            sizes = (self.shared_units, *self.branch_units, n_out)
            return sum(a * b + b for a, b in zip(sizes, sizes[1:]))

        total += len(self.regression) * branch(1)
        if self.classes:
            total += branch(len(self.classes))
        return total

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "Architecture":
        return cls(**data)


def _branch(sizes, rng, dtype):
    layers = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        layers.append(Dense(a, b, rng, dtype))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    return Sequential(*layers)


class DecoderModel:
    """Feature extractor plus branched heads, with min-max bounds for decoding."""

    def __init__(self, arch: Architecture, seed: int | None = 0, dtype=np.float64):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        rng = None if seed is None else np.random.default_rng(seed)
        self.bounds: np.ndarray | None = None
        if arch.kind == "linear":
            self.trunk = Sequential(Flatten())
            self.heads = [Sequential(Dense(arch.flat_features, len(arch.regression), rng, dtype))]
            self.classifier = None
            return
        c1, c2 = arch.conv_channels
        k = arch.kernel_size
        m = arch.bn_momentum
        self.trunk = Sequential(
            Conv2D(1, c1, k, rng, dtype, input_grad=False), ReLU(), BatchNorm(c1, m, dtype=dtype), MaxPool2(),
            Conv2D(c1, c2, k, rng, dtype), ReLU(), BatchNorm(c2, m, dtype=dtype), MaxPool2(),
            Flatten(), Dense(arch.flat_features, arch.shared_units, rng, dtype), ReLU(),
        )
        sizes = (arch.shared_units, *arch.branch_units)
        self.heads = [_branch((*sizes, 1), rng, dtype) for _ in arch.regression]
        self.classifier = _branch((*sizes, len(arch.classes)), rng, dtype) if arch.classes else None

    # -- structure ---------------------------------------------------------

    def modules(self):
        yield "trunk", self.trunk
        for name, head in zip(self._head_names(), self.heads):
            yield name, head
        if self.classifier is not None:
            yield "classifier", self.classifier

    def _head_names(self):
        if self.arch.kind == "linear":
            return ["linear"]
        return [f"head.{f}" for f in self.arch.regression]

    def parameters(self) -> dict:
        return {f"{m}.{k}": v for m, mod in self.modules() for k, v in mod.params.items()}

    def gradients(self) -> dict:
        return {f"{m}.{k}": v for m, mod in self.modules() for k, v in mod.grads.items()}

    def buffers(self) -> dict:
        return {f"{m}.{k}": v for m, mod in self.modules() for k, v in mod.state.items()}

    def _set(self, name, value, attr):
        mod_name, rest = name.split(".", 1) if not name.startswith("head.") else \
            (".".join(name.split(".")[:2]), ".".join(name.split(".")[2:]))
        mod = dict(self.modules())[mod_name]
        idx, key = rest.split(".", 1)
        getattr(mod.layers[int(idx)], attr)[key] = value

    def n_parameters(self) -> int:
        return sum(v.size for v in self.parameters().values())

    def zero_grad(self):
        for _, mod in self.modules():
            mod.zero_grad()

    @property
    def n_regression(self) -> int:
        return len(self.arch.regression)

    # -- passes ------------------------------------------------------------

    def _as_input(self, images):
        x = np.asarray(images, dtype=self.dtype)
        s = self.arch.input_size
        if x.ndim == 2:
            x = x[None]
        if x.shape[-2:] != (s, s):
            raise ShapeError(f"expected {s}x{s} images, got {x.shape}")
        return x.reshape(x.shape[0], s, s, 1)

    def forward(self, images, train=True):
        """Return ``(regression (B, R) or None, logits (B, K) or None)``."""
        feats = self.trunk.forward(self._as_input(images), train)
        reg = None
        if self.arch.regression:
            if self.arch.kind == "linear":
                reg = self.heads[0].forward(feats, train)
            else:
                reg = np.concatenate([h.forward(feats, train) for h in self.heads], axis=1)
        logits = self.classifier.forward(feats, train) if self.classifier is not None else None
        return reg, logits

    def backward(self, dreg=None, dlogits=None):
        dfeat = 0.0
        if dreg is not None:
            if self.arch.kind == "linear":
                dfeat = self.heads[0].backward(dreg)
            else:
                for j, head in enumerate(self.heads):
                    dfeat = dfeat + head.backward(np.ascontiguousarray(dreg[:, j:j + 1]))
        if dlogits is not None and self.classifier is not None:
            dfeat = dfeat + self.classifier.backward(dlogits)
        return self.trunk.backward(dfeat)

    def probabilities(self, logits):
        return softmax(logits)

    # -- min-max scaling of targets ---------------------------------------

    def scale(self, raw):
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return 2.0 * (np.asarray(raw, float) - lo) / (hi - lo) - 1.0

    def unscale(self, scaled):
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return (np.asarray(scaled, float) + 1.0) * (hi - lo) / 2.0 + lo


def build_decoder(arch: Architecture = Architecture(), seed: int | None = 0,
                  dtype=np.float64) -> DecoderModel:
    """Decoder with fan-in uniform weights (``seed=None`` gives all-zero weights)."""
    return DecoderModel(arch, seed, dtype)


def build_linear_baseline(input_size: int = 64, regression=FEATURES, seed: int | None = 0,
                          dtype=np.float64) -> DecoderModel:
    return DecoderModel(Architecture(kind="linear", input_size=input_size,
                                     regression=tuple(regression)), seed, dtype)


# -- checkpoint ------------------------------------------------------------

MODEL_MAGIC = b"SPKM1\n"
MODEL_VERSION = 1


def model_to_bytes(model: DecoderModel) -> bytes:
    params = model.parameters()
    buffers = model.buffers()
    entries = [("param", k, list(v.shape)) for k, v in params.items()]
    entries += [("buffer", k, list(v.shape)) for k, v in buffers.items()]
    descriptor = {
        "architecture": model.arch.to_json(),
        "dtype": model.dtype.name,
        "bounds": None if model.bounds is None else model.bounds.tolist(),
        "tensors": entries,
    }
    desc = json.dumps(descriptor, sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes()
                    for v in [*params.values(), *buffers.values()])
    body = MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(desc)) + desc \
        + struct.pack("<Q", len(blob)) + blob
    return body + struct.pack("<I", zlib.crc32(body))


def model_from_bytes(data: bytes) -> DecoderModel:
    if data[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise BadMagicError("not a model checkpoint (bad magic)")
    pos = len(MODEL_MAGIC)
    if len(data) < pos + 8:
        raise TruncatedError("checkpoint header truncated")
    version, dlen = struct.unpack_from("<II", data, pos)
    if version != MODEL_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {MODEL_VERSION}")
    pos += 8
    if len(data) < pos + dlen + 8:
        raise TruncatedError("checkpoint descriptor truncated")
    blen, = struct.unpack_from("<Q", data, pos + dlen)
    end = pos + dlen + 8 + blen
    if len(data) < end + 4:
        raise TruncatedError(f"checkpoint has {len(data)} bytes, header implies {end + 4}")
    if len(data) > end + 4:
        raise FormatError("trailing bytes after checkpoint")
    crc, = struct.unpack_from("<I", data, end)
    if zlib.crc32(data[:end]) != crc:
        raise ChecksumError("checkpoint CRC-32 mismatch")
    try:
        desc = json.loads(data[pos:pos + dlen])
        arch = Architecture.from_json(desc["architecture"])
        model = DecoderModel(arch, seed=None, dtype=np.dtype(desc["dtype"]))
        blob = np.frombuffer(data, dtype="<f8", count=blen // 8, offset=pos + dlen + 8)
        offset = 0
        for kind, name, shape in desc["tensors"]:
            size = int(np.prod(shape))
            value = blob[offset:offset + size].reshape(shape).astype(model.dtype)
            offset += size
            model._set(name, value, "params" if kind == "param" else "state")
        if offset != blob.size:
            raise FormatError("tensor table does not match parameter blob")
        if desc["bounds"] is not None:
            model.bounds = np.array(desc["bounds"], dtype=float)
        model.zero_grad()
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, IndexError, ConfigurationError) as exc:
        raise FormatError(f"corrupt checkpoint descriptor: {exc}") from None
    return model


def save_model(model: DecoderModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> DecoderModel:
    return model_from_bytes(Path(path).read_bytes())
