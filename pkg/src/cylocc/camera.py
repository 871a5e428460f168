"""Camera branch: image features, depth distribution, context fusion, lifting.

Feature maps use NCHW layout: (cameras, channels, rows, cols).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Params, Tensor
from .geometry import CameraModel, cart_to_cyl, depth_bin_points, project_to_image
from .layers import conv, init_conv
from .pointcloud import PointCloud

BACKBONE_FACTOR = 4


def init_camera_params(params: Params, channels: int, depth_bins: int, rng) -> None:
    init_conv(params, "cam.backbone.0", 3, channels, 3, rng)
    init_conv(params, "cam.backbone.1", channels, channels, 3, rng)
    init_conv(params, "cam.depth", channels, depth_bins, 1, rng, gain=0.5)
    init_conv(params, "cam.ctx_depth", depth_bins, channels, 1, rng, gain=0.5)
    init_conv(params, "cam.ctx_coord", 3 * depth_bins, channels, 1, rng, gain=0.1)


def toy_backbone(params: Params, images: Tensor) -> Tensor:
    """Two stride-2 3x3 convs with relu: (N, 3, H0, W0) -> (N, C, H0/4, W0/4)."""
    images = ad.as_tensor(images)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"toy_backbone: expected (N, 3, H, W) images, got {images.shape}")
    h0, w0 = images.shape[2:]
    if h0 % BACKBONE_FACTOR or w0 % BACKBONE_FACTOR:
        raise ValueError(f"toy_backbone: image size {h0}x{w0} not divisible by {BACKBONE_FACTOR}")
    x = ad.relu(conv(params, "cam.backbone.0", images, stride=2, padding=1))
    return ad.relu(conv(params, "cam.backbone.1", x, stride=2, padding=1))


@dataclass
class DepthHeadOutput:
    depth: Tensor  # (N, K, H, W), a distribution over K at every pixel
    coords: np.ndarray  # (N, K, H, W, 3) cylindrical bin centers
    points: np.ndarray  # (N, K, H, W, 3) Cartesian bin centers

    @property
    def bins(self) -> int:
        return self.depth.shape[1]


def bin_geometry(cams: Sequence[CameraModel], feat_h: int, feat_w: int, k: int, d: float):
    """Cartesian and cylindrical bin centers for every camera, (N, K, H, W, 3) each."""
    pts = np.stack([depth_bin_points(c, feat_h, feat_w, k, d) for c in cams])
    return pts, cart_to_cyl(pts)


def depth_head(params: Params, feats: Tensor, bin_points: np.ndarray, bin_coords: np.ndarray) -> DepthHeadOutput:
    logits = conv(params, "cam.depth", feats)
    return DepthHeadOutput(ad.softmax(logits, axis=1), bin_coords, bin_points)


def fuse_context(params: Params, feats: Tensor, dh: DepthHeadOutput) -> Tensor:
    """Depth-aware context: feats + conv1x1(depth) + conv1x1(bin coordinates)."""
    n, c, h, w = feats.shape
    if dh.depth.shape[0] != n or dh.depth.shape[2:] != (h, w):
        raise ValueError(f"fuse_context: depth {dh.depth.shape} does not match features {feats.shape}")
    k = dh.bins
    if params["cam.ctx_depth.w"].shape[:2] != (c, k):
        raise ValueError(f"fuse_context: channel mismatch, features have {c}, projection expects "
                         f"{params['cam.ctx_depth.w'].shape[0]}")
    coord = np.ascontiguousarray(dh.coords.transpose(0, 1, 4, 2, 3)).reshape(n, 3 * k, h, w)
    return feats + conv(params, "cam.ctx_depth", dh.depth) + conv(params, "cam.ctx_coord", Tensor(coord))


def lift_pseudo_cloud(dh: DepthHeadOutput, context: Tensor) -> PointCloud:
    """Outer product of depth distribution and context: one point per (camera, bin, pixel).

    Point feature = depth[n, k, h, w] * context[n, :, h, w]; rows are ordered
    camera-major, then bin, then pixel row-major.
    """
    n, k, h, w = dh.depth.shape
    c = context.shape[1]
    if context.shape != (n, c, h, w):
        raise ValueError(f"lift_pseudo_cloud: context {context.shape} vs depth {dh.depth.shape}")
    dep = ad.broadcast_to(ad.reshape(dh.depth, (n, k, 1, h, w)), (n, k, c, h, w))
    ctx = ad.broadcast_to(ad.reshape(context, (n, 1, c, h, w)), (n, k, c, h, w))
    feats = ad.reshape(ad.transpose(dep * ctx, (0, 1, 3, 4, 2)), (n * k * h * w, c))
    return PointCloud(dh.points.reshape(-1, 3), feats)


@dataclass
class DepthTargets:
    onehot: np.ndarray  # (N, K, H, W)
    mask: np.ndarray  # (N, H, W) bool, pixels with at least one LiDAR hit

    @property
    def empty(self) -> bool:
        return not self.mask.any()


def depth_targets(
    lidar_positions: np.ndarray,
    cams: Sequence[CameraModel],
    feat_h: int,
    feat_w: int,
    k: int,
    d: float,
) -> DepthTargets:
    """Per-feature-pixel one-hot depth bin of the nearest projecting LiDAR point."""
    pts = np.asarray(lidar_positions, dtype=np.float64).reshape(-1, 3)
    onehot = np.zeros((len(cams), k, feat_h, feat_w))
    mask = np.zeros((len(cams), feat_h, feat_w), dtype=bool)
    for ci, cam in enumerate(cams):
        proj = project_to_image(pts, cam)
        vis = proj.visible
        if not vis.any():
            continue
        row = np.floor(proj.v[vis] * feat_h / cam.height).astype(np.int64)
        col = np.floor(proj.u[vis] * feat_w / cam.width).astype(np.int64)
        row = np.minimum(row, feat_h - 1)
        col = np.minimum(col, feat_w - 1)
        depth = proj.depth[vis]
        pix = row * feat_w + col
        nearest = np.full(feat_h * feat_w, np.inf)
        np.minimum.at(nearest, pix, depth)
        hit = np.isfinite(nearest)
        bins = np.minimum(np.floor(nearest[hit] / d).astype(np.int64), k - 1)
        flat = np.zeros((k, feat_h * feat_w))
        flat[bins, np.nonzero(hit)[0]] = 1.0
        onehot[ci] = flat.reshape(k, feat_h, feat_w)
        mask[ci] = hit.reshape(feat_h, feat_w)
    return DepthTargets(onehot, mask)
