"""Run settings: presets, sectioned key-value config files and overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from . import kvfile
from .dataset import DESK_PROTOCOL, FULL_PROTOCOL, SweepProtocol
from .errors import ConfigurationError
from .nn import TrainConfig
from .optics import MaterialConfig, NoiseConfig

PRESETS = ("desk", "full")


@dataclass(frozen=True)
class Settings:
    """Everything a run depends on.  Config keys are ``section.field``, e.g.
    ``material.deform_gain = 0.2`` or ``protocol.depth = 100, 16, 6``."""

    preset: str = "desk"
    material: MaterialConfig = MaterialConfig()
    protocol: SweepProtocol = DESK_PROTOCOL
    noise: NoiseConfig = NoiseConfig()
    train: TrainConfig = TrainConfig(epochs=8)
    seeds: tuple = (0, 1, 2)
    dtype: str = "float32"
    downsample_fraction: float = 0.3
    crop: int = 64

    def replace(self, **changes) -> "Settings":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {"preset": self.preset, "dtype": self.dtype, "seeds": list(self.seeds),
               "downsample_fraction": self.downsample_fraction, "crop": self.crop}
        out["material"] = {k: kvfile.format_value(v) for k, v in self.material.to_dict().items()}
        out["protocol"] = self.protocol.to_dict()
        out["noise"] = dataclasses.asdict(self.noise)
        out["train"] = dataclasses.asdict(self.train)
        return out


def preset(name: str) -> Settings:
    if name == "desk":
        return Settings()
    if name == "full":
        return Settings(preset="full", protocol=FULL_PROTOCOL, train=TrainConfig(epochs=60),
                        dtype="float64")
    raise ConfigurationError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


def apply_values(settings: Settings, values: dict[str, str]) -> Settings:
    """Apply ``section.key = value`` strings on top of ``settings``."""
    groups: dict[str, dict[str, str]] = {}
    top = {}
    for key, text in values.items():
        if "." in key:
            section, name = key.split(".", 1)
            groups.setdefault(section, {})[name] = text
        else:
            top[key] = text
    s = settings
    for section, vals in groups.items():
        if section == "material":
            s = s.replace(material=kvfile.apply(s.material, vals))
        elif section == "noise":
            s = s.replace(noise=kvfile.apply(s.noise, vals))
        elif section == "train":
            try:
                s = s.replace(train=kvfile.apply(s.train, vals))
            except ValueError as exc:
                raise ConfigurationError(str(exc)) from None
        elif section == "protocol":
            s = s.replace(protocol=SweepProtocol.from_kv(vals, s.protocol))
        else:
            raise ConfigurationError(f"unknown config section {section!r}")
    for key, text in top.items():
        if key == "preset":
            continue
        if key == "seeds":
            s = s.replace(seeds=tuple(int(v) for v in text.replace(",", " ").split()))
        elif key == "dtype":
            if text not in ("float32", "float64"):
                raise ConfigurationError("dtype must be float32 or float64")
            s = s.replace(dtype=text)
        elif key == "downsample_fraction":
            s = s.replace(downsample_fraction=float(text))
        elif key == "crop":
            s = s.replace(crop=int(text))
        else:
            raise ConfigurationError(f"unknown config key {key!r}")
    return s


def load_settings(path=None, preset_name: str | None = None) -> Settings:
    """Preset defaults, then the config file (which may name a preset)."""
    values = kvfile.load(path) if path else {}
    name = preset_name or values.get("preset", "desk")
    return apply_values(preset(name), values)
