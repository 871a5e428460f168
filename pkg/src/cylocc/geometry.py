"""Coordinate frames, grid discretizations, and pinhole cameras.

Conventions:
  * cylindrical coordinates are (r, theta, z) with theta in [-pi, pi);
  * image coordinates are continuous pixels where pixel (row i, col j)
    covers [j, j+1) x [i, i+1), so its center is (j + 0.5, i + 0.5);
  * the camera frame is x right, y down, z forward (depth).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

NEAR_PLANE = 0.1


def cart_to_cyl(p: np.ndarray) -> np.ndarray:
    """(..., 3) Cartesian -> (r, theta, z); the origin maps to theta = 0."""
    p = np.asarray(p, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    r = np.hypot(x, y)
    theta = np.arctan2(y, x)
    theta = np.where(theta >= np.pi, -np.pi, theta)
    return np.stack([r, theta, z], axis=-1)


def cyl_to_cart(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    r, theta, z = p[..., 0], p[..., 1], p[..., 2]
    if np.any(r < 0):
        raise ValueError("cyl_to_cart: negative radius")
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=-1)


def rotate_z(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    out = np.array(points, dtype=np.float64, copy=True)
    x, y = out[..., 0].copy(), out[..., 1].copy()
    out[..., 0] = c * x - s * y
    out[..., 1] = s * x + c * y
    return out


@dataclass(frozen=True)
class CartGridSpec:
    x_min: float = -10.0
    x_max: float = 10.0
    y_min: float = -10.0
    y_max: float = 10.0
    z_min: float = -2.0
    z_max: float = 2.0
    nx: int = 40
    ny: int = 40
    nz: int = 8

    def __post_init__(self):
        for lo, hi, ax in ((self.x_min, self.x_max, "x"), (self.y_min, self.y_max, "y"), (self.z_min, self.z_max, "z")):
            if not hi > lo:
                raise ValueError(f"CartGridSpec: {ax}_max must exceed {ax}_min")
        if min(self.nx, self.ny, self.nz) <= 0:
            raise ValueError("CartGridSpec: extents must be positive")

    @classmethod
    def full_scale(cls) -> "CartGridSpec":
        return cls(-50.0, 50.0, -50.0, 50.0, -5.0, 3.0, 200, 200, 16)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def voxel_size(self) -> tuple[float, float, float]:
        return (
            (self.x_max - self.x_min) / self.nx,
            (self.y_max - self.y_min) / self.ny,
            (self.z_max - self.z_min) / self.nz,
        )

    def axis_centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        dx, dy, dz = self.voxel_size
        return (
            self.x_min + (np.arange(self.nx) + 0.5) * dx,
            self.y_min + (np.arange(self.ny) + 0.5) * dy,
            self.z_min + (np.arange(self.nz) + 0.5) * dz,
        )

    def centers(self) -> np.ndarray:
        """Voxel centers, shape (nx, ny, nz, 3)."""
        xs, ys, zs = self.axis_centers()
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def voxel_index(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Integer (N, 3) voxel indices and an in-range mask."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        lo = np.array([self.x_min, self.y_min, self.z_min])
        size = np.array(self.voxel_size)
        idx = np.floor((points - lo) / size).astype(np.int64)
        ok = np.all((idx >= 0) & (idx < np.array(self.shape)), axis=1)
        return idx, ok

    def downscaled(self, level: int) -> "CartGridSpec":
        f = 2**level
        if self.nx % f or self.ny % f or self.nz % f:
            raise ValueError(f"CartGridSpec: extents {self.shape} not divisible by {f}")
        return CartGridSpec(
            self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max,
            self.nx // f, self.ny // f, self.nz // f,
        )


@dataclass(frozen=True)
class CylGridSpec:
    r_min: float = 0.0
    r_max: float = 14.2
    radial_bins: int = 24
    azimuth_bins: int = 32
    z_bins: int = 8
    z_min: float = -2.0
    z_max: float = 2.0

    def __post_init__(self):
        if self.r_min < 0 or not self.r_max > self.r_min:
            raise ValueError("CylGridSpec: need 0 <= r_min < r_max")
        if not self.z_max > self.z_min:
            raise ValueError("CylGridSpec: z_max must exceed z_min")
        if min(self.radial_bins, self.azimuth_bins, self.z_bins) <= 0:
            raise ValueError("CylGridSpec: bin counts must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.radial_bins, self.azimuth_bins, self.z_bins)

    @property
    def dr(self) -> float:
        return (self.r_max - self.r_min) / self.radial_bins

    @property
    def dtheta(self) -> float:
        return 2 * np.pi / self.azimuth_bins

    @property
    def dz(self) -> float:
        return (self.z_max - self.z_min) / self.z_bins

    def azimuth_index(self, theta: np.ndarray) -> np.ndarray:
        idx = np.floor((np.asarray(theta) + np.pi) / self.dtheta).astype(np.int64)
        return np.clip(idx, 0, self.azimuth_bins - 1)

    def bin_index(self, cyl: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(N, 3) integer (r, a, z) bins for cylindrical points plus an in-range mask.

        Points outside [r_min, r_max) x [z_min, z_max) are flagged, not clamped.
        """
        cyl = np.asarray(cyl, dtype=np.float64).reshape(-1, 3)
        r, theta, z = cyl[:, 0], cyl[:, 1], cyl[:, 2]
        ok = (r >= self.r_min) & (r < self.r_max) & (z >= self.z_min) & (z < self.z_max)
        ri = np.floor((r - self.r_min) / self.dr).astype(np.int64)
        zi = np.floor((z - self.z_min) / self.dz).astype(np.int64)
        ri = np.clip(ri, 0, self.radial_bins - 1)
        zi = np.clip(zi, 0, self.z_bins - 1)
        return np.stack([ri, self.azimuth_index(theta), zi], axis=1), ok

    def continuous_coords(self, cyl: np.ndarray) -> np.ndarray:
        """Cylindrical points in bin units; integer values land on bin centers."""
        cyl = np.asarray(cyl, dtype=np.float64)
        r, theta, z = cyl[..., 0], cyl[..., 1], cyl[..., 2]
        return np.stack(
            [
                (r - self.r_min) / self.dr - 0.5,
                (theta + np.pi) / self.dtheta - 0.5,
                (z - self.z_min) / self.dz - 0.5,
            ],
            axis=-1,
        )

    def check_divisible(self, m: int, what: str = "group_count") -> None:
        for name, n in zip(("radial", "azimuth", "z"), self.shape):
            if n % m:
                raise ValueError(f"CylGridSpec: {name} bins {n} not divisible by {what}={m}")

    def downscaled(self, level: int) -> "CylGridSpec":
        f = 2**level
        self.check_divisible(f, "scale factor")
        return CylGridSpec(
            self.r_min, self.r_max, self.radial_bins // f, self.azimuth_bins // f,
            self.z_bins // f, self.z_min, self.z_max,
        )


@dataclass(frozen=True, eq=False)
class CameraModel:
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64)
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if k.shape != (3, 3) or np.any(np.tril(k, -1) != 0) or k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("CameraModel: intrinsics must be upper-triangular with positive focals")
        if r.shape != (3, 3) or np.abs(r @ r.T - np.eye(3)).max() > 1e-9:
            raise ValueError("CameraModel: rotation must be orthonormal")
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        """Camera origin in the ego frame."""
        return -self.rotation.T @ self.translation

    def ego_to_cam(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def cam_to_ego(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def pixel_rays(self, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
        """Camera-frame rays with unit forward component through image points."""
        pix = np.stack([us, vs, np.ones_like(us)], axis=-1)
        return np.linalg.solve(self.intrinsics, pix.reshape(-1, 3).T).T.reshape(pix.shape)


class Projection(NamedTuple):
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    visible: np.ndarray


def project_to_image(points: np.ndarray, cam: CameraModel) -> Projection:
    """Project ego-frame points; points behind the near plane keep u = v = -1."""
    pc = cam.ego_to_cam(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    depth = pc[:, 2]
    front = depth > NEAR_PLANE
    safe = np.where(front, depth, 1.0)
    hom = pc @ cam.intrinsics.T
    u = np.where(front, hom[:, 0] / safe, -1.0)
    v = np.where(front, hom[:, 1] / safe, -1.0)
    visible = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return Projection(u, v, depth, visible)


def feature_pixel_centers(cam: CameraModel, feat_h: int, feat_w: int) -> tuple[np.ndarray, np.ndarray]:
    """Image-plane (u, v) of each feature-grid cell center, each (feat_h, feat_w)."""
    su, sv = cam.width / feat_w, cam.height / feat_h
    us = (np.arange(feat_w) + 0.5) * su
    vs = (np.arange(feat_h) + 0.5) * sv
    gu, gv = np.meshgrid(us, vs)
    return gu, gv


def depth_bin_points(cam: CameraModel, feat_h: int, feat_w: int, k: int, d: float) -> np.ndarray:
    """Ego-frame Cartesian bin centers, shape (K, feat_h, feat_w, 3).

    Bin k sits at camera depth (k + 0.5) * d along each feature pixel's ray.
    """
    if k <= 0 or d <= 0:
        raise ValueError(f"depth bins need K > 0 and d > 0, got K={k}, d={d}")
    gu, gv = feature_pixel_centers(cam, feat_h, feat_w)
    rays = cam.pixel_rays(gu, gv)  # (H, W, 3), forward component 1
    depths = (np.arange(k) + 0.5) * d
    pc = depths[:, None, None, None] * rays[None]
    return cam.cam_to_ego(pc.reshape(-1, 3)).reshape(k, feat_h, feat_w, 3)


def depth_bin_coords(cam: CameraModel, feat_h: int, feat_w: int, k: int, d: float) -> np.ndarray:
    """Cylindrical coordinates of the depth-bin centers, (K, feat_h, feat_w, 3)."""
    return cart_to_cyl(depth_bin_points(cam, feat_h, feat_w, k, d))


def look_rotation(yaw: float) -> np.ndarray:
    """Ego->camera rotation for a level camera facing ``yaw`` about +z."""
    forward = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    return np.stack([right, down, forward])


def make_camera_rig(
    n_cams: int, width: int, height: int, hfov_deg: float = 120.0, mount_height: float = 0.0
) -> list[CameraModel]:
    """Level cameras at evenly spaced yaws, all mounted above the ego origin."""
    f = (width / 2) / np.tan(np.radians(hfov_deg) / 2)
    k = np.array([[f, 0.0, width / 2], [0.0, f, height / 2], [0.0, 0.0, 1.0]])
    cams = []
    for i in range(n_cams):
        rot = look_rotation(2 * np.pi * i / n_cams)
        center = np.array([0.0, 0.0, mount_height])
        cams.append(CameraModel(k, rot, -rot @ center, width, height))
    return cams
