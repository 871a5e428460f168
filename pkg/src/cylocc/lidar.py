"""LiDAR branch: per-point geometric features, image-sampled semantics, fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Params, Tensor
from .geometry import CameraModel, project_to_image
from .layers import init_mlp2, mlp2
from .pointcloud import PointCloud


def init_lidar_params(params: Params, in_channels: int, geo: int, sem: int, out: int, rng) -> None:
    init_mlp2(params, "lidar.geo", in_channels, geo, geo, rng)
    init_mlp2(params, "lidar.fuse", geo + sem, out, out, rng)


def extract_geo(params: Params, raw: PointCloud) -> Tensor:
    """Shared 2-layer MLP over the raw per-point channels (x, y, z, ...)."""
    feats = raw.feature_tensor()
    if feats.shape[1] < 3:
        raise ValueError(f"extract_geo: raw points need at least x, y, z channels, got {feats.shape[1]}")
    return mlp2(params, "lidar.geo", feats)


@dataclass
class SamplingPlan:
    """Where each point lands on every camera's feature grid, and its weight."""

    coords: np.ndarray  # (N_cam, N, 2) continuous (row, col) on the feature grid
    weights: np.ndarray  # (N_cam, N) 1/visible_count where visible, else 0


def plan_semantic_sampling(
    positions: np.ndarray, cams: Sequence[CameraModel], feat_h: int, feat_w: int
) -> SamplingPlan:
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    coords = np.zeros((len(cams), len(pts), 2))
    vis = np.zeros((len(cams), len(pts)))
    for ci, cam in enumerate(cams):
        proj = project_to_image(pts, cam)
        coords[ci, :, 0] = proj.v * feat_h / cam.height - 0.5
        coords[ci, :, 1] = proj.u * feat_w / cam.width - 0.5
        vis[ci] = proj.visible
    count = vis.sum(axis=0)
    weights = np.divide(vis, count, out=np.zeros_like(vis), where=count > 0)
    return SamplingPlan(coords, weights)


def sample_semantic(
    positions: np.ndarray,
    context: Tensor,
    cams: Sequence[CameraModel],
    plan: SamplingPlan | None = None,
) -> Tensor:
    """Mean of bilinear context samples over the cameras that see each point.

    Points seen by no camera get a zero vector.
    """
    n_cam, c, h, w = context.shape
    if plan is None:
        plan = plan_semantic_sampling(positions, cams, h, w)
    n = plan.weights.shape[1]
    out = None
    for ci in range(n_cam):
        wts = plan.weights[ci]
        if not wts.any():
            continue
        plane = ad.transpose(context[ci], (1, 2, 0))
        sampled = ad.bilinear_sample(plane, plan.coords[ci], ("clamp", "clamp"))
        term = sampled * Tensor(np.repeat(wts[:, None], c, axis=1))
        out = term if out is None else out + term
    return out if out is not None else Tensor(np.zeros((n, c)))


def fuse_point_features(params: Params, geo: Tensor, sem: Tensor, positions: np.ndarray) -> PointCloud:
    if geo.shape[0] != sem.shape[0]:
        raise ValueError(f"fuse_point_features: {geo.shape[0]} geometric vs {sem.shape[0]} semantic rows")
    if geo.shape[0] == 0:
        out = params["lidar.fuse.1.w"].shape[1]
        return PointCloud(positions, Tensor(np.zeros((0, out))))
    return PointCloud(positions, mlp2(params, "lidar.fuse", ad.concat([geo, sem], axis=1)))


def lidar_branch(
    params: Params,
    raw: PointCloud,
    context: Tensor,
    cams: Sequence[CameraModel],
    plan: SamplingPlan | None = None,
) -> PointCloud:
    if len(raw) == 0:
        geo = Tensor(np.zeros((0, params["lidar.geo.1.w"].shape[1])))
        sem = Tensor(np.zeros((0, context.shape[1])))
    else:
        geo = extract_geo(params, raw)
        sem = sample_semantic(raw.positions, context, cams, plan)
    return fuse_point_features(params, geo, sem, raw.positions)
