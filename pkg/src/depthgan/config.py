"""Run configuration: presets, flat ``section.key = value`` files, and overrides.

Precedence, lowest first: built-in defaults, the selected preset, the config
file, then command-line overrides. The preset is chosen by the ``preset`` key
(from the file or the command line) before anything else is applied.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from .camera import CameraIntrinsics, intrinsics_from_focal
from .discriminator import DiscriminatorConfig
from .generator import GeneratorConfig
from .losses import LossWeights


class ConfigError(ValueError):
    """A configuration key is unknown, missing, or holds an invalid value."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ModelConfig:
    resolution: int = 64
    latent_dim: int = 128
    mapping_layers: int = 2
    angle_frequencies: int = 4
    g_channel_base: int = 1024
    g_channel_max: int = 64
    d_channel_base: int = 1024
    d_channel_max: int = 64
    branch_channels: int = 32
    depth_classes: int = 10


@dataclass
class CameraConfig:
    focal_mm: float = 26.0
    sensor_width_mm: float = 36.0
    near: float = 0.5
    far: float = 10.0
    # "fixed": axis at (0, 0, pivot_depth); "mean": axis at the source view's mean depth
    pivot: str = "fixed"
    pivot_depth: float = 4.0
    theta_min_deg: float = -15.0
    theta_max_deg: float = 15.0


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1.5e-3
    beta1: float = 0.0
    beta2: float = 0.99
    steps: int = 500
    seed: int = 0
    checkpoint_every: int = 250
    log_every: int = 1


@dataclass
class DataConfig:
    root: str = ""
    n_scenes: int = 1000
    angles_per_scene: int = 2
    seed: int = 1234


@dataclass
class MetricsConfig:
    n_pairs: int = 256
    seed: int = 0
    embedder: str = "random-conv"


_SECTIONS = {
    "model": ModelConfig,
    "camera": CameraConfig,
    "loss": LossWeights,
    "train": TrainConfig,
    "data": DataConfig,
    "metrics": MetricsConfig,
}

# keys that have no usable default and must be supplied before use
REQUIRED_FOR = {"train": ["data.root"]}

PRESETS: Dict[str, Dict[str, Any]] = {
    # 500 CPU steps leave too little time for a 0.3 RGB rotation weight to pay off
    "desk64": {"loss.rot_rgb": 10.0},
    "paper128": {
        "model.resolution": 128,
        "model.latent_dim": 512,
        "model.mapping_layers": 8,
        "model.g_channel_base": 16384,
        "model.g_channel_max": 512,
        "model.d_channel_base": 16384,
        "model.d_channel_max": 512,
        "model.branch_channels": 128,
        "train.batch_size": 64,
        "train.steps": 200000,
        "train.checkpoint_every": 5000,
        "loss.rot_depth": 50.0,
        "loss.rot_rgb": 0.3,
        "loss.fake_depth": 1e-3,
        "loss.real_depth": 0.8,
        "loss.r1": 0.3,
    },
}
PRESETS["paper256-bedroom"] = {
    **PRESETS["paper128"],
    "model.resolution": 256,
    "model.g_channel_base": 32768,
    "model.d_channel_base": 32768,
    "loss.rot_rgb": 0.5,
    "loss.r1": 0.5,
}
PRESETS["paper256-kitchen"] = {**PRESETS["paper256-bedroom"], "loss.rot_rgb": 0.4}


@dataclass
class RunConfig:
    preset: str = "desk64"
    model: ModelConfig = field(default_factory=ModelConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    # -- flat view ---------------------------------------------------------
    def to_flat(self) -> Dict[str, Any]:
        flat: Dict[str, Any] = {"preset": self.preset}
        for section in _SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                flat[f"{section}.{f.name}"] = getattr(obj, f.name)
        return flat

    def dumps(self) -> str:
        lines = ["# resolved configuration"]
        for key, value in self.to_flat().items():
            if value is None or value == "":
                lines.append(f"# {key} is unset")
                continue
            lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    # -- derived objects ---------------------------------------------------
    def generator_config(self) -> GeneratorConfig:
        m, c = self.model, self.camera
        return GeneratorConfig(
            latent_dim=m.latent_dim,
            mapping_layers=m.mapping_layers,
            angle_frequencies=m.angle_frequencies,
            resolution=m.resolution,
            channel_base=m.g_channel_base,
            channel_max=m.g_channel_max,
            near=c.near,
            far=c.far,
            theta_min_deg=c.theta_min_deg,
            theta_max_deg=c.theta_max_deg,
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        m = self.model
        return DiscriminatorConfig(
            resolution=m.resolution,
            channel_base=m.d_channel_base,
            channel_max=m.d_channel_max,
            depth_classes=m.depth_classes,
            branch_channels=m.branch_channels,
        )

    def intrinsics(self) -> CameraIntrinsics:
        r = self.model.resolution
        return intrinsics_from_focal(self.camera.focal_mm, self.camera.sensor_width_mm, r, r)

    @property
    def theta_range(self):
        return math.radians(self.camera.theta_min_deg), math.radians(self.camera.theta_max_deg)

    def validate(self) -> "RunConfig":
        checks = [
            ("train.batch_size", self.train.batch_size >= 2, "must be >= 2 (rotation pairs share codes)"),
            ("camera.theta_max_deg", self.camera.theta_min_deg < self.camera.theta_max_deg, "must exceed camera.theta_min_deg"),
            ("camera.far", 0 < self.camera.near < self.camera.far, "need 0 < near < far"),
            ("camera.pivot", self.camera.pivot in ("fixed", "mean"), "must be 'fixed' or 'mean'"),
            ("train.lr", self.train.lr > 0, "must be positive"),
            ("train.steps", self.train.steps >= 0, "must be nonnegative"),
            ("metrics.n_pairs", self.metrics.n_pairs >= 1, "must be positive"),
            ("metrics.embedder", self.metrics.embedder in ("random-conv", "downsample"), "unknown embedder"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(key, msg)
        for key, build in (("model", self.generator_config), ("model", self.discriminator_config), ("loss", lambda: LossWeights(**self.loss.as_dict()))):
            try:
                build()
            except ValueError as exc:
                raise ConfigError(key, str(exc)) from exc
        return self

    def require(self, command: str) -> None:
        flat = self.to_flat()
        for key in REQUIRED_FOR.get(command, []):
            if flat[key] in ("", None):
                raise ConfigError(key, f"required by '{command}' and has no default")


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, raw: Any, target_type) -> Any:
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if target_type is bool:
            if isinstance(raw, bool):
                return raw
            if str(raw).lower() in ("1", "true", "yes"):
                return True
            if str(raw).lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if target_type is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if target_type is float:
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(key, f"cannot interpret {raw!r} as {target_type.__name__}") from None


def _field_types():
    import typing

    types = {}
    for section, cls in _SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            types[f"{section}.{f.name}"] = hints[f.name]
    return types


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if value == "":
            raise ConfigError(key, "has no value")
        values[key] = value
    return values


def load_config_file(path) -> Dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def resolve_config(file_values: Optional[Mapping[str, Any]] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Build a validated :class:`RunConfig` from file values and overrides."""
    file_values = dict(file_values or {})
    overrides = dict(overrides or {})
    preset = overrides.get("preset", file_values.get("preset", "desk64"))
    if preset not in PRESETS:
        raise ConfigError("preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    types = _field_types()
    merged: Dict[str, Any] = dict(PRESETS[preset])
    for source in (file_values, overrides):
        for key, value in source.items():
            if key == "preset":
                continue
            if key not in types:
                raise ConfigError(key, "unknown configuration key")
            merged[key] = value
    cfg = RunConfig(preset=preset)
    for key, value in merged.items():
        section, name = key.split(".", 1)
        setattr(getattr(cfg, section), name, _coerce(key, value, types[key]))
    return cfg.validate()
