"""Shared conv pyramid refining each fused plane into four scales.

One parameter set serves all three planes.  The encoder is three stride-2
3x3 convs; the decoder is a top-down pathway of 1x1 lateral convs plus
nearest-neighbour 2x upsampling.  Padding is circular along azimuth axes.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Params, Tensor
from .layers import conv, init_conv
from .tpv import PLANE_PAD, TpvPlanes

LEVELS = 4


@dataclass
class MultiScalePlanes:
    scales: list[TpvPlanes]

    def __getitem__(self, level: int) -> TpvPlanes:
        return self.scales[level]

    def __len__(self) -> int:
        return len(self.scales)


def init_encdec_params(params: Params, channels: int, rng) -> None:
    for i in range(1, LEVELS):
        init_conv(params, f"encdec.down{i}", channels, channels, 3, rng)
    for i in range(LEVELS):
        init_conv(params, f"encdec.lat{i}", channels, channels, 1, rng, gain=0.5)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of (1, C, H, W)."""
    n, c, h, w = x.shape
    x = ad.reshape(x, (n, c, h, 1, w, 1))
    x = ad.broadcast_to(x, (n, c, h, 2, w, 2))
    return ad.reshape(x, (n, c, 2 * h, 2 * w))


def encode_decode(params: Params, plane: Tensor, pad_mode: tuple[str, str]) -> list[Tensor]:
    """(H, W, C) plane -> four (H/2^l, W/2^l, C) planes, l = 0..3."""
    h, w, c = plane.shape
    f = 2 ** (LEVELS - 1)
    if h % f or w % f:
        raise ValueError(f"encode_decode: plane extents {h}x{w} not divisible by {f}")
    x = ad.reshape(ad.transpose(plane, (2, 0, 1)), (1, c, h, w))
    feats = [x]
    for i in range(1, LEVELS):
        x = ad.relu(conv(params, f"encdec.down{i}", x, stride=2, padding=1, pad_mode=pad_mode))
        feats.append(x)
    outs = [None] * LEVELS
    top = conv(params, f"encdec.lat{LEVELS - 1}", feats[-1])
    outs[-1] = top
    for i in range(LEVELS - 2, -1, -1):
        top = conv(params, f"encdec.lat{i}", feats[i]) + upsample2x(top)
        outs[i] = top
    return [ad.transpose(ad.reshape(o, o.shape[1:]), (1, 2, 0)) for o in outs]


def shared_encode_decode(params: Params, fused: TpvPlanes) -> MultiScalePlanes:
    per_plane = {name: encode_decode(params, p, PLANE_PAD[name]) for name, p in fused.items()}
    return MultiScalePlanes(
        [TpvPlanes(per_plane["rd"][l], per_plane["dz"][l], per_plane["zr"][l]) for l in range(LEVELS)]
    )
