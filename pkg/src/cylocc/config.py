"""Pipeline configuration and the key=value config file."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from .geometry import CameraModel, CartGridSpec, CylGridSpec, make_camera_rig
from .camera import BACKBONE_FACTOR
from .encdec import LEVELS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    cart: CartGridSpec = field(default_factory=CartGridSpec)
    cyl: CylGridSpec = field(default_factory=CylGridSpec)
    depth_bins: int = 12
    depth_interval: float = 1.0
    group_count: int = 8
    channels: int = 16  # C: LiDAR point features and every plane
    geo_channels: int = 8  # C1
    sem_channels: int = 16  # C2, also the camera context width
    num_classes: int = 4
    lam: float = 3.0
    lr: float = 0.05
    momentum: float = 0.9
    clip_norm: float = 5.0
    steps: int = 200
    seed: int = 0
    n_cams: int = 2
    image_h: int = 32
    image_w: int = 48
    hfov_deg: float = 120.0
    lidar_beams: int = 20
    lidar_azimuths: int = 360
    lidar_noise: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        pos = {
            "depth.K": self.depth_bins, "fusion.M": self.group_count, "channels.C": self.channels,
            "channels.C1": self.geo_channels, "channels.C2": self.sem_channels, "classes": self.num_classes,
            "camera.count": self.n_cams, "lidar.beams": self.lidar_beams, "lidar.azimuths": self.lidar_azimuths,
        }
        for key, v in pos.items():
            if v <= 0:
                raise ConfigError(f"{key} must be positive, got {v}")
        if self.depth_interval <= 0:
            raise ConfigError(f"depth.d must be positive, got {self.depth_interval}")
        if self.num_classes > 255:
            raise ConfigError(f"classes must fit in a byte, got {self.num_classes}")
        if self.lam < 0 or self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need loss.lambda >= 0, train.lr >= 0 and 0 <= train.momentum < 1")
        scale = 2 ** (LEVELS - 1)
        for name, n in zip(("cyl.R", "cyl.A", "cyl.Z"), self.cyl.shape):
            if n % self.group_count:
                raise ConfigError(f"{name}={n} not divisible by fusion.M={self.group_count}")
            if n % scale:
                raise ConfigError(f"{name}={n} not divisible by {scale} (four-scale pyramid)")
        for name, n in zip(("cart.nx", "cart.ny", "cart.nz"), self.cart.shape):
            if n % scale:
                raise ConfigError(f"{name}={n} not divisible by {scale} (four-scale pyramid)")
        if self.image_h % BACKBONE_FACTOR or self.image_w % BACKBONE_FACTOR:
            raise ConfigError(f"image size {self.image_h}x{self.image_w} not divisible by {BACKBONE_FACTOR}")

    @property
    def feat_hw(self) -> tuple[int, int]:
        return self.image_h // BACKBONE_FACTOR, self.image_w // BACKBONE_FACTOR

    def cameras(self) -> list[CameraModel]:
        return make_camera_rig(self.n_cams, self.image_w, self.image_h, self.hfov_deg)

    def with_overrides(self, **kv) -> "PipelineConfig":
        return replace(self, **kv)


# config key -> (attribute, sub-attribute or None, type)
KEYS: dict[str, tuple[str, str | None, type]] = {
    **{f"cart.{k}": ("cart", k, int if k.startswith("n") else float)
       for k in ("x_min", "x_max", "y_min", "y_max", "z_min", "z_max", "nx", "ny", "nz")},
    "cyl.r_min": ("cyl", "r_min", float),
    "cyl.r_max": ("cyl", "r_max", float),
    "cyl.R": ("cyl", "radial_bins", int),
    "cyl.A": ("cyl", "azimuth_bins", int),
    "cyl.Z": ("cyl", "z_bins", int),
    "depth.K": ("depth_bins", None, int),
    "depth.d": ("depth_interval", None, float),
    "fusion.M": ("group_count", None, int),
    "channels.C": ("channels", None, int),
    "channels.C1": ("geo_channels", None, int),
    "channels.C2": ("sem_channels", None, int),
    "classes": ("num_classes", None, int),
    "loss.lambda": ("lam", None, float),
    "train.lr": ("lr", None, float),
    "train.momentum": ("momentum", None, float),
    "train.clip_norm": ("clip_norm", None, float),
    "train.steps": ("steps", None, int),
    "train.seed": ("seed", None, int),
    "camera.count": ("n_cams", None, int),
    "camera.height": ("image_h", None, int),
    "camera.width": ("image_w", None, int),
    "camera.hfov": ("hfov_deg", None, float),
    "lidar.beams": ("lidar_beams", None, int),
    "lidar.azimuths": ("lidar_azimuths", None, int),
    "lidar.noise_sd": ("lidar_noise", None, float),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse ``key = value`` lines; '#' starts a comment.  Unknown keys are rejected."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _convert(key, value, f"{source}:{lineno}")
    return out


def _convert(key: str, value: Any, where: str) -> Any:
    if key not in KEYS:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    typ = KEYS[key][2]
    try:
        if typ is int and isinstance(value, str):
            return int(value, 10)
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: {key} expects {typ.__name__}, got {value!r}") from None


def build_config(values: Mapping[str, Any], base: PipelineConfig | None = None) -> PipelineConfig:
    base = base or PipelineConfig()
    top: dict[str, Any] = {}
    cart: dict[str, Any] = {}
    cyl: dict[str, Any] = {}
    for key, value in values.items():
        attr, sub, _ = KEYS.get(key, (None, None, None))
        if attr is None:
            raise ConfigError(f"unknown config key {key!r}")
        value = _convert(key, value, "config")
        if attr == "cart":
            cart[sub] = value
        elif attr == "cyl":
            cyl[sub] = value
        else:
            top[attr] = value
    try:
        if cart:
            top["cart"] = replace(base.cart, **cart)
        if cyl:
            top["cyl"] = replace(base.cyl, **cyl)
        return replace(base, **top)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    """Defaults, then the file, then ``overrides`` (flag > file > default)."""
    values: dict[str, Any] = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(), str(path)))
    values.update(overrides or {})
    return build_config(values)


def config_to_text(cfg: PipelineConfig) -> str:
    lines = []
    for key, (attr, sub, _) in KEYS.items():
        v = getattr(getattr(cfg, attr), sub) if sub else getattr(cfg, attr)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


__all__ = [
    "ConfigError", "PipelineConfig", "KEYS", "parse_config_text", "build_config", "load_config", "config_to_text",
]
