"""Polar tri-perspective planes: spatial group pooling and gated plane fusion.

A cylindrical volume (R, A, Z, C) is squeezed three ways:
  rd: pool over Z -> (R, A, C)
  dz: pool over R -> (A, Z, C)
  zr: pool over A -> (Z, R, C)
Each pooled axis is cut into ``M`` contiguous slabs, max-pooled per slab, the
slab results are stacked on the channel axis and a per-position linear+relu
maps the M*C channels back to C.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Params, Tensor
from .layers import dense, init_linear

PLANES = ("rd", "dz", "zr")
# volume axes (R=0, A=1, Z=2) -> (plane rows, plane cols, pooled axis)
PLANE_AXES = {"rd": (0, 1, 2), "dz": (1, 2, 0), "zr": (2, 0, 1)}
# padding mode of each plane's (rows, cols) in convolutions; azimuth is periodic
PLANE_PAD = {"rd": ("zero", "circular"), "dz": ("circular", "zero"), "zr": ("zero", "zero")}
# sampling mode of each plane's (rows, cols) for bilinear lookups
PLANE_SAMPLE = {"rd": ("clamp", "wrap"), "dz": ("wrap", "clamp"), "zr": ("clamp", "clamp")}


@dataclass
class TpvPlanes:
    rd: Tensor
    dz: Tensor
    zr: Tensor

    def __iter__(self):
        return iter((self.rd, self.dz, self.zr))

    def items(self):
        return zip(PLANES, self)

    @property
    def channels(self) -> int:
        return self.rd.shape[-1]

    def map(self, fn) -> "TpvPlanes":
        return TpvPlanes(*(fn(name, p) for name, p in self.items()))


def init_group_pool_params(
    params: Params, prefix: str, channels: int, groups: int, rng, out_channels: int | None = None
) -> None:
    for name in PLANES:
        init_linear(params, f"{prefix}.{name}", groups * channels, out_channels or channels, rng)


def group_max(volume: Tensor, plane: str, groups: int) -> Tensor:
    """Slab-wise max over the plane's pooled axis: (rows, cols, M*C), group-major channels."""
    rows, cols, pooled = PLANE_AXES[plane]
    c = volume.shape[3]
    n = volume.shape[pooled]
    if groups <= 0 or n % groups:
        axis_name = "RAZ"[pooled]
        raise ValueError(f"group pooling: axis {axis_name} of extent {n} not divisible by M={groups}")
    v = ad.transpose(volume, (rows, cols, pooled, 3))
    h, w = v.shape[:2]
    v = ad.reshape(v, (h, w, groups, n // groups, c))
    g = ad.max_reduce(v, axis=3)
    return ad.reshape(g, (h, w, groups * c))


def spatial_group_pool(params: Params, prefix: str, volume: Tensor, groups: int) -> TpvPlanes:
    def one(plane):
        pooled = group_max(volume, plane, groups)
        h, w, mc = pooled.shape
        flat = ad.relu(dense(params, f"{prefix}.{plane}", ad.reshape(pooled, (h * w, mc))))
        return ad.reshape(flat, (h, w, flat.shape[1]))

    return TpvPlanes(*(one(p) for p in PLANES))


def init_fusion_params(params: Params, channels: int, rng) -> None:
    for name in PLANES:
        init_linear(params, f"fuse.{name}", 2 * channels, channels, rng, gain=0.5)


def fuse_plane(params: Params, name: str, cam: Tensor, lidar: Tensor) -> Tensor:
    """g = sigmoid(1x1 conv of [cam, lidar]); out = g*cam + (1-g)*lidar."""
    if cam.shape != lidar.shape:
        raise ad.ShapeError(f"dynamic_fuse: plane {name} shapes {cam.shape} and {lidar.shape}")
    h, w, c = cam.shape
    cf = ad.reshape(cam, (h * w, c))
    lf = ad.reshape(lidar, (h * w, c))
    gate = ad.sigmoid(dense(params, f"fuse.{name}", ad.concat([cf, lf], axis=1)))
    out = lf + gate * (cf - lf)
    return ad.reshape(out, (h, w, c))


def dynamic_fuse(params: Params, cam: TpvPlanes, lidar: TpvPlanes) -> TpvPlanes:
    return TpvPlanes(*(fuse_plane(params, n, c, l) for n, c, l in zip(PLANES, cam, lidar)))
