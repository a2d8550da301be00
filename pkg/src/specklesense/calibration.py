"""Tune material gains so speckle decorrelation matches target correlations."""

from __future__ import annotations

import dataclasses
import math
from typing import NamedTuple, Sequence

import numpy as np

from .errors import CalibrationError, ConfigurationError
from .optics import (FEATURES, MaterialConfig, MaterialField, NoiseConfig, Stimulus,
                     build_material, render_speckle, speckle_correlation)


class Target(NamedTuple):
    axis: str
    delta: float
    correlation: float


# Depth/position targets measured on the real slab; the thermal one is a chosen default.
DEFAULT_TARGETS = (
    Target("depth", 12.0, 0.61),
    Target("position", 120.0, 0.66),
    Target("temperature", 0.2, 0.85),
)

TOLERANCE = 0.1
MAX_STEPS = 40


@dataclasses.dataclass(frozen=True)
class ProbeRanges:
    depth: tuple[float, float] = (100.0, 212.0)
    position: tuple[float, float] = (0.0, 1120.0)
    temperature: tuple[float, float] = (21.0, 23.0)


def _with_config(field: MaterialField, config: MaterialConfig) -> MaterialField:
    # gains do not enter the random screens, so the arrays can be reused
    return dataclasses.replace(field, config=config)


def probe_stimuli(axis: str, delta: float, probes: int, seed: int,
                  ranges: ProbeRanges = ProbeRanges(), thermal_ref: float = 22.0):
    """Deterministic ``(x, x + delta along axis)`` pairs for correlation probes."""
    if axis not in FEATURES:
        raise ConfigurationError(f"unknown axis {axis!r}")
    rng = np.random.default_rng([seed, 0xC0DE, FEATURES.index(axis)])
    pairs = []
    for _ in range(probes):
        d = rng.uniform(*ranges.depth)
        p = rng.uniform(*ranges.position)
        t = thermal_ref if axis != "temperature" else rng.uniform(*ranges.temperature)
        x = Stimulus(d, p, t)
        pairs.append((x, x.replace(**{axis: getattr(x, axis) + delta})))
    return pairs


def measure_correlation(field: MaterialField, axis: str, delta: float, probes: int = 8,
                        noise: NoiseConfig = NoiseConfig(), seed: int = 0,
                        ranges: ProbeRanges = ProbeRanges()) -> float:
    """Mean speckle correlation over ``probes`` stimulus pairs separated by ``delta``."""
    values = []
    for k, (a, b) in enumerate(probe_stimuli(axis, delta, probes, seed, ranges,
                                             field.config.thermal_ref)):
        ia = render_speckle(field, a, noise.with_seed(noise.seed + 2 * k))
        ib = render_speckle(field, b, noise.with_seed(noise.seed + 2 * k + 1))
        values.append(speckle_correlation(ia, ib))
    return float(np.mean(values))


def _check_targets(targets: Sequence[Target]) -> list[Target]:
    targets = [Target(*t) for t in targets]
    for axis in FEATURES:
        per_axis = sorted((t for t in targets if t.axis == axis), key=lambda t: t.delta)
        for lo, hi in zip(per_axis, per_axis[1:]):
            if not hi.correlation < lo.correlation:
                raise ConfigurationError(f"targets on {axis} must decrease with delta")
    for t in targets:
        if t.axis not in FEATURES:
            raise ConfigurationError(f"unknown axis {t.axis!r}")
        if not (t.delta > 0 and -1 < t.correlation < 1):
            raise ConfigurationError(f"bad target {t}")
    return targets


def _bisect_gain(field, name, targets: Sequence[Target], lo, hi, probes, noise, ranges):
    """Log-scale bisection of one gain on the mean residual of ``targets``.

    Correlation falls as the gain grows, so the mean residual is decreasing.
    Returns ``(abs residual, gain)`` for the best gain visited.
    """
    best = (math.inf, None)
    cfg = field.config
    for _ in range(MAX_STEPS):
        mid = math.sqrt(lo * hi)
        trial = _with_config(field, cfg.replace(**{name: mid}))
        residual = np.mean([
            measure_correlation(trial, t.axis, t.delta, probes, noise, cfg.seed, ranges)
            - t.correlation for t in targets])
        if abs(residual) < best[0]:
            best = (abs(residual), mid)
        if abs(residual) < 0.005:
            break
        if residual > 0:
            lo = mid
        else:
            hi = mid
    return best


def calibrate_sensitivity(config: MaterialConfig, targets: Sequence[Target] = DEFAULT_TARGETS,
                          probes: int = 8, noise: NoiseConfig = NoiseConfig(),
                          ranges: ProbeRanges = ProbeRanges(), return_report: bool = False):
    """Bisect ``thermal_gain`` and ``deform_gain`` onto the correlation targets.

    One gain drives both mechanical axes, so the deformation gain balances the
    smallest-delta depth and position targets (mean residual zero); the thermal
    gain is fitted to the smallest temperature target.  Every target is then
    re-measured and must land within +-0.1.  With ``return_report`` the
    measured correlation per target is returned alongside the config.
    """
    if probes < 8:
        raise ConfigurationError("calibration needs at least 8 probe pairs")
    targets = _check_targets(targets)
    if not targets:
        return (config, {}) if return_report else config

    field = build_material(config)
    cfg = config
    def nearest(axis):
        on_axis = [t for t in targets if t.axis == axis]
        return [min(on_axis, key=lambda t: t.delta)] if on_axis else []

    if thermal := nearest("temperature"):
        _, gain = _bisect_gain(field, "thermal_gain", thermal, 1e-4, 1e3, probes, noise, ranges)
        cfg = cfg.replace(thermal_gain=gain)
    if mech := nearest("depth") + nearest("position"):
        _, gain = _bisect_gain(_with_config(field, cfg), "deform_gain", mech,
                               1e-4, 1e2, probes, noise, ranges)
        cfg = cfg.replace(deform_gain=gain)

    final = _with_config(field, cfg)
    achieved = {}
    for t in targets:
        achieved[t] = measure_correlation(final, t.axis, t.delta, probes, noise, cfg.seed, ranges)
    misses = {t: c for t, c in achieved.items() if abs(c - t.correlation) > TOLERANCE}
    if misses:
        detail = ", ".join(f"{t.axis}@{t.delta:g}: got {c:.3f} want {t.correlation:.3f}"
                           for t, c in misses.items())
        raise CalibrationError(
            f"unreachable targets ({detail})",
            best_gains={"deform_gain": cfg.deform_gain, "thermal_gain": cfg.thermal_gain},
            achieved=achieved,
        )
    return (cfg, achieved) if return_report else cfg
