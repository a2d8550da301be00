"""Phase-screen speckle encoder.

A virtual soft slab is a thin random phase screen under a Gaussian laser
spot.  Indentation and temperature perturb the screen's phase; the camera sees
the far-field intensity, i.e. the squared modulus of the 2-D DFT of the
screened field.

DFT convention: numpy's unnormalised forward transform, so for a field ``E``
on an ``n x n`` grid ``sum(|fft2(E)|**2) == n*n * sum(|E|**2)``.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import kvfile
from .errors import ConfigurationError, DegenerateInputError, DomainError, ShapeError
from .mechanics import Shape, flat_punch_profile, shaped_displacement

# interface (low-sensitivity) mode scalings
INTERFACE_DEFORM_SCALE = 0.05
INTERFACE_BASE_PHASE_SCALE = 0.3

EXPOSURE_PERCENTILE = 99.0
EXPOSURE_TARGET = 230.0


class SensitivityMode(enum.Enum):
    FULL = "full"
    INTERFACE = "interface"


@dataclass(frozen=True)
class Stimulus:
    """Physical stimulus: depth [um], position [um] along the material's
    vertical axis, temperature [degC] and indenter shape."""

    depth: float
    position: float
    temperature: float
    shape: Shape = Shape.NONE

    def as_array(self) -> np.ndarray:
        return np.array([self.depth, self.position, self.temperature], dtype=float)

    def replace(self, **changes) -> "Stimulus":
        return dataclasses.replace(self, **changes)


FEATURES = ("depth", "position", "temperature")


@dataclass(frozen=True)
class MaterialConfig:
    grid_size: int = 256
    extent: float = 20.0               # mm per side
    wavelength: float = 632.8          # nm, recorded only
    spot_diameter: float = 8.0         # mm, 1/e^2 intensity diameter
    indenter_radius: float = 1.5       # mm
    deform_gain: float = 0.181         # rad per um; calibrated value for seed 0
    thermal_gain: float = 3.35         # rad per degC; calibrated value for seed 0
    thermal_ref: float = 22.0          # degC
    strain_spread: float = 0.3         # std of the per-pixel deformation sensitivity
    sensitivity_mode: SensitivityMode = SensitivityMode.FULL
    seed: int = 0
    depth_max: float = 1000.0          # um
    temp_min: float = 10.0
    temp_max: float = 40.0

    def __post_init__(self):
        if isinstance(self.sensitivity_mode, str):
            object.__setattr__(self, "sensitivity_mode", SensitivityMode(self.sensitivity_mode))
        n = self.grid_size
        if not isinstance(n, (int, np.integer)) or n < 2 or n & (n - 1):
            raise ConfigurationError(f"grid_size must be a power of two, got {n}")
        if not self.extent > 0:
            raise ConfigurationError(f"extent must be positive, got {self.extent}")
        if not 0 < self.spot_diameter < self.extent:
            raise ConfigurationError("need extent > spot_diameter > 0")
        if not self.indenter_radius > 0:
            raise ConfigurationError("indenter_radius must be positive")
        if not self.deform_gain > 0:
            raise ConfigurationError("deform_gain must be positive")
        if self.thermal_gain < 0:
            raise ConfigurationError("thermal_gain must be non-negative")
        if self.strain_spread < 0:
            raise ConfigurationError("strain_spread must be non-negative")
        if not self.temp_min < self.temp_max:
            raise ConfigurationError("need temp_min < temp_max")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must fit in 64 bits")

    @property
    def pixel(self) -> float:
        return self.extent / self.grid_size

    @property
    def position_limit(self) -> float:
        """Largest |position| in um that keeps the contact centre on the grid."""
        return 500.0 * self.extent

    @property
    def effective_deform_gain(self) -> float:
        if self.sensitivity_mode is SensitivityMode.INTERFACE:
            return self.deform_gain * INTERFACE_DEFORM_SCALE
        return self.deform_gain

    @property
    def base_phase_scale(self) -> float:
        if self.sensitivity_mode is SensitivityMode.INTERFACE:
            return INTERFACE_BASE_PHASE_SCALE
        return 1.0

    def replace(self, **changes) -> "MaterialConfig":
        return dataclasses.replace(self, **changes)

    def interface(self) -> "MaterialConfig":
        return self.replace(sensitivity_mode=SensitivityMode.INTERFACE)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def save(self, path) -> None:
        kvfile.dump(self.to_dict(), path, header="material configuration")

    @classmethod
    def load(cls, path) -> "MaterialConfig":
        return kvfile.apply(cls(), kvfile.load(path))

    def check(self, x: Stimulus) -> None:
        if not 0 <= x.depth <= self.depth_max:
            raise DomainError(f"depth {x.depth} um outside [0, {self.depth_max}]")
        if abs(x.position) > self.position_limit:
            raise DomainError(f"position {x.position} um outside +-{self.position_limit}")
        if not self.temp_min <= x.temperature <= self.temp_max:
            raise DomainError(
                f"temperature {x.temperature} degC outside [{self.temp_min}, {self.temp_max}]")


@dataclass(frozen=True)
class NoiseConfig:
    laser_sigma: float = 0.01     # lognormal sigma of the per-pixel multiplicative noise
    read_sigma: float = 0.5       # additive Gaussian, in quantisation levels
    seed: int = 0

    def with_seed(self, seed: int) -> "NoiseConfig":
        return dataclasses.replace(self, seed=int(seed))


NOISELESS = NoiseConfig(laser_sigma=0.0, read_sigma=0.0)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def _smooth_unit_field(rng: np.random.Generator, n: int) -> np.ndarray:
    h = gaussian_filter(rng.standard_normal((n, n)), sigma=n / 16, mode="wrap")
    h -= h.mean()
    h /= h.std()
    return h


@dataclass(frozen=True, eq=False)
class MaterialField:
    """Immutable realisation of a virtual material; safe to share across threads."""

    config: MaterialConfig
    base_phase: np.ndarray
    aperture: np.ndarray
    thermal_field: np.ndarray
    strain_field: np.ndarray
    drift_field: np.ndarray
    xx: np.ndarray = field(repr=False)
    yy: np.ndarray = field(repr=False)


def build_material(config: MaterialConfig) -> MaterialField:
    n = config.grid_size
    streams = np.random.SeedSequence(config.seed).spawn(4)
    base = np.random.default_rng(streams[0]).uniform(0.0, 2 * np.pi, (n, n))
    thermal = _smooth_unit_field(np.random.default_rng(streams[1]), n)
    strain = 1.0 + config.strain_spread * np.random.default_rng(streams[2]).standard_normal((n, n))
    drift = _smooth_unit_field(np.random.default_rng(streams[3]), n)
    coords = (np.arange(n) - n / 2) * config.pixel
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    w = config.spot_diameter / 2
    aperture = np.exp(-(xx**2 + yy**2) / w**2)
    return MaterialField(
        config=config,
        base_phase=_readonly(base),
        aperture=_readonly(aperture),
        thermal_field=_readonly(thermal),
        strain_field=_readonly(strain),
        drift_field=_readonly(drift),
        xx=_readonly(xx),
        yy=_readonly(yy),
    )


def surface_displacement(field: MaterialField, depth: float, position: float,
                         shape: Shape = Shape.NONE, points=None) -> np.ndarray:
    """Surface displacement [um] over the material grid, or at ``points``.

    ``points`` is an optional ``(x_mm, y_mm)`` pair of arrays (circle and
    default indenter only).  The contact centre sits ``position`` um above the
    spot centre along the vertical axis.
    """
    if depth < 0:
        raise DomainError("depth must be non-negative")
    shape = Shape.parse(shape)
    cfg = field.config
    cy = position / 1000.0
    if shape in (Shape.NONE, Shape.CIRCLE):
        xs, ys = (field.xx, field.yy) if points is None else points
        r = np.hypot(np.asarray(xs, float), np.asarray(ys, float) - cy)
        return flat_punch_profile(r, depth, cfg.indenter_radius)
    if points is not None:
        raise ValueError("point evaluation is only defined for the circular punch")
    return shaped_displacement(field.xx, field.yy, depth, cy, shape,
                               cfg.indenter_radius, cfg.pixel)


def phase_map(field: MaterialField, x: Stimulus, extra_phase=None) -> np.ndarray:
    cfg = field.config
    uz = surface_displacement(field, x.depth, x.position, x.shape)
    phi = cfg.base_phase_scale * field.base_phase
    phi = phi + cfg.effective_deform_gain * field.strain_field * uz
    if cfg.thermal_gain:
        phi = phi + cfg.thermal_gain * (x.temperature - cfg.thermal_ref) * field.thermal_field
    if extra_phase is not None:
        phi = phi + extra_phase
    return phi


def far_field_intensity(aperture: np.ndarray, phase: np.ndarray) -> np.ndarray:
    """|DFT(aperture * exp(i phase))|^2 with the zero frequency centred."""
    spectrum = np.fft.fft2(aperture * np.exp(1j * phase))
    return np.fft.fftshift(np.abs(spectrum) ** 2)


@dataclass(frozen=True, eq=False)
class SpeckleImage:
    intensities: np.ndarray          # non-negative, exposure-scaled, pre-quantisation
    pixels: np.ndarray | None        # uint8 after clip-and-quantise
    noise_seed: int
    exposure_scale: float

    @property
    def height(self) -> int:
        return self.intensities.shape[0]

    @property
    def width(self) -> int:
        return self.intensities.shape[1]

    @property
    def values(self) -> np.ndarray:
        """The camera reading: quantised pixels if present, else intensities."""
        if self.pixels is not None:
            return self.pixels.astype(float)
        return self.intensities


def expose(intensity: np.ndarray, noise: NoiseConfig, quantize: bool = True) -> SpeckleImage:
    """Apply laser noise, read noise, exposure scaling and 8-bit quantisation."""
    rng = np.random.default_rng(noise.seed)
    noisy = intensity
    if noise.laser_sigma:
        noisy = noisy * rng.lognormal(0.0, noise.laser_sigma, intensity.shape)
    level = np.percentile(noisy, EXPOSURE_PERCENTILE)
    scale = EXPOSURE_TARGET / level if level > 0 else 1.0
    scaled = noisy * scale
    if noise.read_sigma:
        reading = scaled + rng.normal(0.0, noise.read_sigma, intensity.shape)
    else:
        reading = scaled
    pixels = np.clip(np.rint(reading), 0, 255).astype(np.uint8) if quantize else None
    return SpeckleImage(
        intensities=_readonly(np.maximum(scaled, 0.0)),
        pixels=None if pixels is None else _readonly(pixels),
        noise_seed=int(noise.seed),
        exposure_scale=float(scale),
    )


def render_speckle(field: MaterialField, x: Stimulus, noise: NoiseConfig = NoiseConfig(),
                   extra_phase=None, quantize: bool = True) -> SpeckleImage:
    """Render the camera image for stimulus ``x``; deterministic in (field, x, noise)."""
    field.config.check(x)
    intensity = far_field_intensity(field.aperture, phase_map(field, x, extra_phase))
    return expose(intensity, noise, quantize)


def speckle_correlation(a, b) -> float:
    """Pearson correlation of two intensity images over all pixels."""
    va = a.values if isinstance(a, SpeckleImage) else np.asarray(a, dtype=float)
    vb = b.values if isinstance(b, SpeckleImage) else np.asarray(b, dtype=float)
    if va.shape != vb.shape:
        raise ShapeError(f"image shapes differ: {va.shape} vs {vb.shape}")
    da = va - va.mean()
    db = vb - vb.mean()
    sa = np.sqrt(np.mean(da * da))
    sb = np.sqrt(np.mean(db * db))
    if sa == 0 or sb == 0:
        raise DegenerateInputError("zero-variance image in correlation")
    return float(np.clip(np.mean(da * db) / (sa * sb), -1.0, 1.0))


def write_pgm(path, image) -> None:
    """Binary 8-bit PGM (P5)."""
    pixels = image.pixels if isinstance(image, SpeckleImage) else image
    if pixels is None:
        raise ValueError("image has no quantised pixels")
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 2:
        raise ValueError("PGM export needs a 2-D uint8 array")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    body = data[pos + 1:pos + 1 + w * h]
    if len(body) != w * h:
        raise ValueError(f"{path}: truncated PGM payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()
