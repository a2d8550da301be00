"""Sweep protocols, preprocessing, target scaling and the dataset container."""

from __future__ import annotations

import dataclasses
import itertools
import json
import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kvfile
from .errors import (BadMagicError, ChecksumError, ConfigurationError, DegenerateInputError,
                     EmptyProtocolError, FormatError, SampleError, ShapeError, SpeckleError,
                     TruncatedError, VersionMismatchError)
from .mechanics import Shape
from .optics import (FEATURES, MaterialField, NoiseConfig, SpeckleImage, Stimulus,
                     render_speckle)

# commanded-value jitter, matching the stage and thermal controller precision
DEPTH_JITTER = 0.5      # um, uniform +-
TEMPERATURE_JITTER = 0.2  # degC, uniform +-


@dataclass(frozen=True)
class Axis:
    start: float
    step: float
    count: int

    def values(self) -> np.ndarray:
        return self.start + self.step * np.arange(self.count)

    def half_interval(self) -> "Axis":
        """Midpoints between consecutive grid values (a single point stays put)."""
        if self.count < 2:
            return self
        return Axis(self.start + self.step / 2, self.step, self.count - 1)

    @classmethod
    def parse(cls, value) -> "Axis":
        if isinstance(value, Axis):
            return value
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split()]
        start, step, count = value
        return cls(float(start), float(step), int(count))


@dataclass(frozen=True)
class SweepProtocol:
    depth: Axis = Axis(100.0, 16.0, 8)
    position: Axis = Axis(0.0, 160.0, 8)
    temperature: Axis = Axis(17.9, 0.2, 40)
    repeats: int = 6
    shapes: tuple = ()

    def __post_init__(self):
        for name in FEATURES:
            object.__setattr__(self, name, Axis.parse(getattr(self, name)))
        object.__setattr__(self, "shapes", tuple(Shape.parse(s) for s in self.shapes))
        if self.repeats < 1:
            raise ConfigurationError("repeats must be >= 1")

    @property
    def grid_size(self) -> int:
        """N_d: stimuli in one full sweep."""
        n = self.depth.count * self.position.count * self.temperature.count
        return n * max(1, len(self.shapes))

    @property
    def total(self) -> int:
        return self.grid_size * self.repeats

    def replace(self, **changes) -> "SweepProtocol":
        return dataclasses.replace(self, **changes)

    def half_interval(self, repeats: int = 1) -> "SweepProtocol":
        return self.replace(depth=self.depth.half_interval(),
                            position=self.position.half_interval(),
                            temperature=self.temperature.half_interval(),
                            repeats=repeats)

    def to_dict(self) -> dict:
        out = {name: [getattr(self, name).start, getattr(self, name).step,
                      getattr(self, name).count] for name in FEATURES}
        out["repeats"] = self.repeats
        out["shapes"] = [s.value for s in self.shapes]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SweepProtocol":
        return cls(**{name: Axis.parse(data[name]) for name in FEATURES},
                   repeats=int(data["repeats"]), shapes=tuple(data.get("shapes", ())))

    @classmethod
    def from_kv(cls, values: dict, base: "SweepProtocol | None" = None) -> "SweepProtocol":
        proto = base or cls()
        changes = {}
        for key, text in values.items():
            if key in FEATURES:
                changes[key] = Axis.parse(text)
            elif key == "repeats":
                changes[key] = int(text)
            elif key == "shapes":
                changes[key] = tuple(s.strip() for s in text.split(",") if s.strip())
            else:
                raise ConfigurationError(f"unknown protocol key {key!r}")
        return proto.replace(**changes)

    def save(self, path) -> None:
        d = self.to_dict()
        d["shapes"] = ", ".join(d["shapes"])
        kvfile.dump(d, path, header="sweep protocol: start, step, count per axis")


FULL_PROTOCOL = SweepProtocol()
# Same intervals as the full protocol on a smaller grid; temperatures bracket 22 degC.
DESK_PROTOCOL = SweepProtocol(depth=Axis(100.0, 16.0, 6), position=Axis(0.0, 160.0, 6),
                              temperature=Axis(21.1, 0.2, 10), repeats=3)


def sweep_grid(protocol: SweepProtocol) -> list[Stimulus]:
    """Commanded stimuli: shape outermost, then depth, position, temperature
    (innermost), the whole sweep repeated ``repeats`` times in sequence."""
    axes = [protocol.depth, protocol.position, protocol.temperature]
    if any(a.count < 1 for a in axes):
        raise EmptyProtocolError("every protocol axis needs count >= 1")
    shapes = protocol.shapes or (Shape.NONE,)
    one = [Stimulus(float(d), float(p), float(t), s)
           for s in shapes
           for d, p, t in itertools.product(*(a.values() for a in axes))]
    return one * protocol.repeats


# -- preprocessing ---------------------------------------------------------

def preprocess(image, downsample_fraction: float = 0.3, crop: int = 64) -> np.ndarray:
    """Box-average downsampling, centre crop, then per-image standardisation.

    The pooling kernel is ``round(1/fraction)`` pixels; the result is float64
    with zero mean and unit variance.
    """
    values = image.values if isinstance(image, SpeckleImage) else np.asarray(image, float)
    if not 0 < downsample_fraction <= 1:
        raise ConfigurationError("downsample fraction must be in (0, 1]")
    k = max(1, int(round(1.0 / downsample_fraction)))
    h, w = values.shape
    hk, wk = h // k, w // k
    pooled = values[:hk * k, :wk * k].reshape(hk, k, wk, k).mean(axis=(1, 3))
    if crop > min(hk, wk) or crop < 1:
        raise ShapeError(f"crop {crop} does not fit downsampled image {hk}x{wk}")
    top, left = (hk - crop) // 2, (wk - crop) // 2
    out = pooled[top:top + crop, left:left + crop]
    mean = out.mean()
    std = out.std()
    if std == 0:
        raise DegenerateInputError("constant image cannot be standardised")
    return (out - mean) / std


# -- min-max scaling -------------------------------------------------------

def scaling_bounds(raw: np.ndarray) -> np.ndarray:
    """Per-feature ``(min, max)`` rows of a ``(N, F)`` stimulus array."""
    raw = np.asarray(raw, dtype=float)
    return np.stack([raw.min(axis=0), raw.max(axis=0)], axis=1)


def _check_bounds(bounds):
    bounds = np.asarray(bounds, dtype=float)
    if np.any(bounds[..., 1] <= bounds[..., 0]):
        raise DegenerateInputError("scaling bounds need max > min for every feature")
    return bounds


def minmax_scale(raw, bounds):
    """Affine map of ``[min, max]`` onto ``[-1, 1]``; values outside extrapolate."""
    b = _check_bounds(bounds)
    return 2.0 * (np.asarray(raw, float) - b[..., 0]) / (b[..., 1] - b[..., 0]) - 1.0


def minmax_unscale(scaled, bounds):
    b = _check_bounds(bounds)
    return (np.asarray(scaled, float) + 1.0) * (b[..., 1] - b[..., 0]) / 2.0 + b[..., 0]


# -- drift -----------------------------------------------------------------

@dataclass(frozen=True)
class DriftConfig:
    """Slow material drift: an extra phase ``rate * days * h2(u)``.

    ``rate`` is in rad/day; ``None`` means the default calibration, under
    which a day-30 image keeps a correlation of about 0.9 with day 0.
    """

    days: float = 0.0
    rate: float | None = None

    def phase(self, field: MaterialField):
        if not self.days:
            return None
        rate = default_drift_rate(field) if self.rate is None else self.rate
        return (rate * self.days) * field.drift_field


def _field_correlation(field: MaterialField, phase_shift) -> float:
    """Predicted intensity correlation |<exp(i dphi)>_w|^2 with spot-power weights."""
    w = field.aperture**2
    mu = np.sum(w * np.exp(1j * phase_shift)) / np.sum(w)
    return float(abs(mu) ** 2)


_DRIFT_CACHE: dict = {}


def default_drift_rate(field: MaterialField, target: float = 0.9, days: float = 30.0) -> float:
    key = (id(field.drift_field), target, days)
    if key not in _DRIFT_CACHE:
        lo, hi = 0.0, 10.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if _field_correlation(field, mid * field.drift_field) > target:
                lo = mid
            else:
                hi = mid
        _DRIFT_CACHE[key] = 0.5 * (lo + hi) / days
    return _DRIFT_CACHE[key]


# -- dataset ---------------------------------------------------------------

@dataclass(eq=False)
class Dataset:
    images: np.ndarray                 # (N, S, S) float32, preprocessed
    stimuli: np.ndarray                # (N, 3) float64, raw (jittered) depth/position/temperature
    shapes: np.ndarray                 # (N,) uint8 shape codes
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.images)
        if self.stimuli.shape != (n, 3) or self.shapes.shape != (n,):
            raise ShapeError("dataset arrays disagree on sample count")

    def __len__(self):
        return len(self.images)

    @property
    def side(self) -> int:
        return self.images.shape[1] if len(self.images) else 0

    def bounds(self, features=FEATURES) -> np.ndarray:
        idx = [FEATURES.index(f) for f in features]
        return scaling_bounds(self.stimuli[:, idx])

    def scaled(self, bounds, features=FEATURES) -> np.ndarray:
        idx = [FEATURES.index(f) for f in features]
        return minmax_scale(self.stimuli[:, idx], bounds)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices)
        meta = dict(self.metadata)
        meta["subset_of"] = self.metadata.get("seed")
        return Dataset(self.images[indices], self.stimuli[indices], self.shapes[indices], meta)

    def commanded(self) -> np.ndarray:
        """Pre-jitter stimuli regenerated from the stored protocol."""
        proto = SweepProtocol.from_dict(self.metadata["protocol"])
        return np.array([s.as_array() for s in sweep_grid(proto)])

    def labels(self) -> np.ndarray:
        return self.shapes.astype(np.int64)

    def equals(self, other: "Dataset") -> bool:
        return (self.images.dtype == other.images.dtype
                and np.array_equal(self.images.view(np.uint32), other.images.view(np.uint32))
                and np.array_equal(self.stimuli.view(np.uint64), other.stimuli.view(np.uint64))
                and np.array_equal(self.shapes, other.shapes)
                and self.metadata == other.metadata)


def sample_seed(creation_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(creation_seed), int(index)])


def jitter_amplitudes(jitter) -> tuple[float, float]:
    """``True`` for the default (depth, temperature) jitter, ``False`` for none,
    or an explicit pair of half-widths."""
    if jitter is True:
        return DEPTH_JITTER, TEMPERATURE_JITTER
    if jitter is False or jitter is None:
        return 0.0, 0.0
    depth, temperature = jitter
    return float(depth), float(temperature)


def jittered(x: Stimulus, rng: np.random.Generator, jitter=True) -> Stimulus:
    # always draw, so the noise seed that follows does not depend on the jitter setting
    dd, dt = rng.uniform(-1.0, 1.0, 2)
    a_d, a_t = jitter_amplitudes(jitter)
    if a_d == 0.0 and a_t == 0.0:
        return x
    return x.replace(depth=max(0.0, x.depth + a_d * dd),
                     temperature=x.temperature + a_t * dt)


def render_raw(field: MaterialField, commanded: Stimulus, creation_seed: int, index: int,
               noise: NoiseConfig, extra_phase=None, jitter=True):
    """Camera frame of one sample and its jittered stimulus.

    Depends only on its arguments, never on other samples.
    """
    rng = np.random.default_rng(sample_seed(creation_seed, index))
    x = jittered(commanded, rng, jitter)
    noise_seed = int(rng.integers(0, 2**63))
    return render_speckle(field, x, noise.with_seed(noise_seed), extra_phase), x


def render_sample(field: MaterialField, commanded: Stimulus, creation_seed: int, index: int,
                  noise: NoiseConfig, extra_phase=None, jitter=True,
                  fraction: float = 0.3, crop: int = 64):
    """Preprocessed float32 image of one sample and its jittered stimulus."""
    image, x = render_raw(field, commanded, creation_seed, index, noise, extra_phase, jitter)
    return preprocess(image, fraction, crop).astype(np.float32), x


def generate_dataset(field: MaterialField, protocol: SweepProtocol,
                     noise: NoiseConfig = NoiseConfig(), drift: DriftConfig | None = None,
                     seed: int = 0, jitter=True, fraction: float = 0.3,
                     crop: int = 64, workers: int = 1, stimuli=None) -> Dataset:
    """Render, preprocess and collect every sweep point in sweep order.

    ``stimuli`` overrides the protocol's grid with explicit commanded values.
    Per-sample seeds derive from ``(seed, index)``, so the result is identical
    for any ``workers`` count.
    """
    grid = list(stimuli) if stimuli is not None else sweep_grid(protocol)
    extra = drift.phase(field) if drift is not None else None

    def one(item):
        i, x = item
        try:
            return render_sample(field, x, seed, i, noise, extra, jitter, fraction, crop)
        except SpeckleError as exc:
            raise SampleError(i, exc) from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, enumerate(grid)))
    else:
        results = [one(item) for item in enumerate(grid)]
    images = np.stack([r[0] for r in results]) if results else np.zeros((0, crop, crop), np.float32)
    raw = np.array([r[1].as_array() for r in results]).reshape(-1, 3)
    shapes = np.array([r[1].shape.code for r in results], dtype=np.uint8)
    meta = {
        "seed": int(seed),
        "protocol": protocol.to_dict(),
        "noise": dataclasses.asdict(noise),
        "drift": None if drift is None else dataclasses.asdict(drift),
        "material": {k: (v.value if hasattr(v, "value") else v)
                     for k, v in field.config.to_dict().items()},
        "jitter": list(jitter_amplitudes(jitter)),
        "downsample_fraction": float(fraction),
        "crop": int(crop),
        "explicit_stimuli": stimuli is not None,
    }
    return Dataset(images, raw, shapes, meta)


# -- container -------------------------------------------------------------
#
#   magic "SPKL1\n" | u32 version | u64 count | u32 side | u32 meta length |
#   meta (UTF-8 JSON) | count x (f32[side*side] image, 3 x f64 stimulus, u8 shape) |
#   u32 CRC-32 of everything before it.  All little-endian, records packed.

DATASET_MAGIC = b"SPKL1\n"
DATASET_VERSION = 1
_HEADER = struct.Struct("<IQII")


def _record_dtype(side: int) -> np.dtype:
    return np.dtype([("image", "<f4", (side, side)), ("stimulus", "<f8", 3), ("shape", "u1")])


def dataset_to_bytes(d: Dataset) -> bytes:
    meta = json.dumps(d.metadata, sort_keys=True).encode()
    side = d.side
    records = np.empty(len(d), dtype=_record_dtype(side))
    records["image"] = d.images
    records["stimulus"] = d.stimuli
    records["shape"] = d.shapes
    body = DATASET_MAGIC + _HEADER.pack(DATASET_VERSION, len(d), side, len(meta)) + meta \
        + records.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def dataset_from_bytes(data: bytes) -> Dataset:
    m = len(DATASET_MAGIC)
    if data[:m] != DATASET_MAGIC:
        raise BadMagicError("not a dataset file (bad magic)")
    if len(data) < m + _HEADER.size:
        raise TruncatedError("dataset header truncated")
    version, count, side, meta_len = _HEADER.unpack_from(data, m)
    if version != DATASET_VERSION:
        raise VersionMismatchError(f"dataset version {version}, expected {DATASET_VERSION}")
    record = _record_dtype(side)
    payload = m + _HEADER.size + meta_len
    expected = payload + count * record.itemsize + 4
    if len(data) < expected:
        raise TruncatedError(f"dataset has {len(data)} bytes, header implies {expected}")
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after dataset")
    crc, = struct.unpack_from("<I", data, expected - 4)
    if zlib.crc32(memoryview(data)[:expected - 4]) != crc:
        raise ChecksumError("dataset CRC-32 mismatch")
    try:
        meta = json.loads(data[m + _HEADER.size:payload])
    except ValueError as exc:
        raise FormatError(f"corrupt dataset metadata: {exc}") from None
    records = np.frombuffer(data, dtype=record, count=count, offset=payload)
    return Dataset(
        images=np.ascontiguousarray(records["image"], dtype=np.float32),
        stimuli=np.ascontiguousarray(records["stimulus"], dtype=np.float64),
        shapes=np.ascontiguousarray(records["shape"], dtype=np.uint8),
        metadata=meta,
    )


def save_dataset(d: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(d))


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


def interval_protocol(base: SweepProtocol, depth_step: float, position_step: float,
                      n_target: int | None = None) -> SweepProtocol:
    """Resample ``base``'s depth/position ranges at new steps.

    Ranges are kept (a coarser step gives fewer grid points); ``repeats`` is
    raised so the sample count stays close to ``n_target`` (default: base total).
    """
    n_target = base.total if n_target is None else n_target

    def resample(axis: Axis, step: float) -> Axis:
        span = axis.step * (axis.count - 1)
        count = max(2, int(math.floor(span / step + 1e-9)) + 1)
        return Axis(axis.start, step, count)

    proto = base.replace(depth=resample(base.depth, depth_step),
                         position=resample(base.position, position_step))
    return proto.replace(repeats=max(1, int(round(n_target / proto.grid_size))))
