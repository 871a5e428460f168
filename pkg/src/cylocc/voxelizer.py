"""Cylindrical partitioning with per-voxel channel-wise max pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, record
from .geometry import CylGridSpec, cart_to_cyl
from .pointcloud import PointCloud


@dataclass
class CylVolume:
    spec: CylGridSpec
    features: Tensor  # (R, A, Z, C); empty voxels hold 0
    occupied: np.ndarray  # (R, A, Z) bool
    discarded: int
    argmax: np.ndarray  # (R*A*Z, C) winning point index, -1 where empty


def assign_voxels(positions: np.ndarray, spec: CylGridSpec) -> np.ndarray:
    """Flat voxel id per point, or -1 for points outside the grid."""
    idx, ok = spec.bin_index(cart_to_cyl(np.asarray(positions).reshape(-1, 3)))
    _, a, z = spec.shape
    flat = (idx[:, 0] * a + idx[:, 1]) * z + idx[:, 2]
    return np.where(ok, flat, -1)


def scatter_max(features: np.ndarray, voxel_ids: np.ndarray, n_voxels: int):
    """Channel-wise max of point rows per voxel, ties to the lowest point index.

    Returns (pooled (n_voxels, C), argmax (n_voxels, C), occupied (n_voxels,)).
    """
    n, c = features.shape
    pooled = np.zeros((n_voxels, c))
    argmax = np.full((n_voxels, c), -1, dtype=np.int64)
    occupied = np.zeros(n_voxels, dtype=bool)
    keep = np.nonzero(voxel_ids >= 0)[0]
    if keep.size == 0:
        return pooled, argmax, occupied
    order = keep[np.argsort(voxel_ids[keep], kind="stable")]
    vids = voxel_ids[order]
    starts = np.concatenate([[0], np.nonzero(np.diff(vids))[0] + 1])
    seg_vid = vids[starts]
    f = features[order]
    seg_max = np.maximum.reduceat(f, starts, axis=0)
    seg_of_row = np.repeat(np.arange(len(starts)), np.diff(np.append(starts, len(order))))
    cand = np.where(f == seg_max[seg_of_row], order[:, None], n)
    seg_arg = np.minimum.reduceat(cand, starts, axis=0)
    pooled[seg_vid] = seg_max
    argmax[seg_vid] = seg_arg
    occupied[seg_vid] = True
    return pooled, argmax, occupied


def voxelize_backward(grad: np.ndarray, argmax: np.ndarray, n_points: int) -> np.ndarray:
    """Route each (voxel, channel) gradient to the point that won the max."""
    c = grad.shape[-1]
    grad = grad.reshape(-1, c)
    gp = np.zeros((n_points, c))
    vox, ch = np.nonzero(argmax >= 0)
    # within one channel every point wins at most one voxel, so no collisions
    gp[argmax[vox, ch], ch] = grad[vox, ch]
    return gp


def voxelize(cloud: PointCloud, spec: CylGridSpec, voxel_ids: np.ndarray | None = None) -> CylVolume:
    """Bin a point cloud into ``spec`` and max-pool point features per voxel."""
    feats = cloud.feature_tensor()
    if voxel_ids is None:
        voxel_ids = assign_voxels(cloud.positions, spec)
    r, a, z = spec.shape
    nv = r * a * z
    c = feats.shape[1]
    pooled, argmax, occ = scatter_max(feats.data, voxel_ids, nv)
    n = feats.shape[0]
    out = record(
        pooled.reshape(r, a, z, c),
        "voxel_max",
        (feats,),
        lambda g: (voxelize_backward(g, argmax, n),),
        saved={"argmax": argmax},
    )
    return CylVolume(spec, out, occ.reshape(r, a, z), int((voxel_ids < 0).sum()), argmax)
