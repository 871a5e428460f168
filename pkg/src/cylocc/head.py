"""Cartesian occupancy from polar planes: sample, sum, classify."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Params, Tensor
from .geometry import CartGridSpec, CylGridSpec, cart_to_cyl
from .layers import init_mlp2, mlp2
from .tpv import PLANE_SAMPLE, TpvPlanes


@dataclass
class OccGrid:
    """Semantic labels per voxel, 0 = empty."""

    labels: np.ndarray  # (X, Y, Z) uint8
    num_classes: int  # semantic classes, labels lie in [0, num_classes]

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ValueError(f"OccGrid: labels must be 3D, got shape {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > self.num_classes):
            raise ValueError(f"OccGrid: labels outside [0, {self.num_classes}]")
        self.labels = self.labels.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, OccGrid)
            and self.num_classes == other.num_classes
            and np.array_equal(self.labels, other.labels)
        )


def plane_coords(cart: CartGridSpec, cyl: CylGridSpec) -> dict[str, np.ndarray]:
    """Continuous (row, col) lookup positions of every voxel center on each plane."""
    cc = cyl.continuous_coords(cart_to_cyl(cart.centers().reshape(-1, 3)))
    r, a, z = cc[:, 0], cc[:, 1], cc[:, 2]
    return {
        "rd": np.stack([r, a], axis=1),
        "dz": np.stack([a, z], axis=1),
        "zr": np.stack([z, r], axis=1),
    }


def sample_tpv_to_volume(
    planes: TpvPlanes, cart: CartGridSpec, cyl: CylGridSpec, coords: dict | None = None
) -> Tensor:
    """Sum of bilinear plane samples at each voxel center, (X, Y, Z, C).

    Azimuth wraps periodically; radius and height clamp to edge bins.
    """
    if coords is None:
        coords = plane_coords(cart, cyl)
    expect = {"rd": cyl.shape[:2], "dz": cyl.shape[1:], "zr": (cyl.shape[2], cyl.shape[0])}
    out = None
    for name, plane in planes.items():
        if plane.shape[:2] != expect[name]:
            raise ValueError(f"sample_tpv_to_volume: plane {name} {plane.shape[:2]} != grid {expect[name]}")
        s = ad.bilinear_sample(plane, coords[name], PLANE_SAMPLE[name])
        out = s if out is None else out + s
    return ad.reshape(out, cart.shape + (out.shape[1],))


def init_head_params(params: Params, channels: int, num_classes: int, rng) -> None:
    init_mlp2(params, "head", channels, channels, num_classes + 1, rng, gain=0.5)


def classify(params: Params, volume: Tensor) -> Tensor:
    """Per-voxel 2-layer MLP: (..., C) -> (..., Cls + 1) logits; class 0 = empty."""
    lead = volume.shape[:-1]
    flat = ad.reshape(volume, (int(np.prod(lead)), volume.shape[-1]))
    logits = mlp2(params, "head", flat)
    return ad.reshape(logits, lead + (logits.shape[1],))


def logits_to_grid(logits: Tensor | np.ndarray, shape: tuple[int, int, int], num_classes: int) -> OccGrid:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return OccGrid(np.argmax(data.reshape(shape + (num_classes + 1,)), axis=-1), num_classes)
