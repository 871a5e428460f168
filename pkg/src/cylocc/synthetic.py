"""Synthetic scenes with exact ground truth, a spinning LiDAR and simple cameras.

Every shape is convex, so a ray meets it over a single interval found by
intersecting per-constraint slabs; the entry point is the visible hit.

Random scenes are laid out so every surface sits on voxel-center planes of
the default Cartesian grid (and poles are thinner than a voxel around a
voxel-center axis).  That makes center-containment ground truth agree with
LiDAR hits: the voxel containing a noise-free hit always has a labeled center.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import CameraModel, CartGridSpec
from .head import OccGrid
from .pointcloud import PointCloud

SHAPES = ("box", "cylinder", "ground-plane")
CONTAIN_EPS = 1e-9
HIT_EPS = 1e-9
BACKGROUND = (128, 128, 128)
PALETTE = np.array(
    [[150, 110, 60], [220, 40, 40], [240, 220, 30], [40, 90, 220], [40, 200, 90], [200, 60, 220], [30, 200, 210], [250, 150, 30]],
    dtype=np.float64,
)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    cls: int
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # box: full extents; cylinder: (diameter, diameter, height); ground: (-, -, thickness)
    yaw: float = 0.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}, expected one of {SHAPES}")
        if self.cls < 1:
            raise ValueError(f"object class must be >= 1, got {self.cls}")
        if any(s < 0 for s in self.size):
            raise ValueError(f"object size must be non-negative, got {self.size}")

    def local(self, points: np.ndarray) -> np.ndarray:
        """Points relative to the center, rotated into the object's frame."""
        p = np.asarray(points, dtype=np.float64) - np.asarray(self.center)
        if self.yaw == 0.0:
            return p
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        out = p.copy()
        out[..., 0] = c * p[..., 0] + s * p[..., 1]
        out[..., 1] = -s * p[..., 0] + c * p[..., 1]
        return out

    def _local_dir(self, d: np.ndarray) -> np.ndarray:
        if self.yaw == 0.0:
            return d
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        out = d.copy()
        out[..., 0] = c * d[..., 0] + s * d[..., 1]
        out[..., 1] = -s * d[..., 0] + c * d[..., 1]
        return out

    def residual(self, points: np.ndarray) -> np.ndarray:
        """Implicit surface function: < 0 inside, 0 on the surface, > 0 outside."""
        p = self.local(points)
        half = np.asarray(self.size) / 2
        if self.shape == "box":
            return (np.abs(p) - half).max(axis=-1)
        zres = np.abs(p[..., 2]) - half[2]
        if self.shape == "ground-plane":
            return zres
        return np.maximum(np.hypot(p[..., 0], p[..., 1]) - half[0], zres)

    def contains(self, points: np.ndarray) -> np.ndarray:
        return self.residual(points) <= CONTAIN_EPS

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Ray parameter of the first surface hit, inf where the ray misses."""
        o = self.local(origins)
        d = self._local_dir(np.asarray(dirs, dtype=np.float64))
        half = np.asarray(self.size) / 2
        n = len(o)
        t_in = np.full(n, -np.inf)
        t_out = np.full(n, np.inf)
        axes = (0, 1, 2) if self.shape == "box" else (2,)
        for ax in axes:
            lo, hi = _slab(o[:, ax], d[:, ax], -half[ax], half[ax])
            t_in, t_out = np.maximum(t_in, lo), np.minimum(t_out, hi)
        if self.shape == "cylinder":
            lo, hi = _disk(o[:, :2], d[:, :2], half[0])
            t_in, t_out = np.maximum(t_in, lo), np.minimum(t_out, hi)
        hit = (t_in <= t_out + HIT_EPS) & (t_out > HIT_EPS)
        t = np.where(t_in > HIT_EPS, t_in, t_out)
        return np.where(hit, t, np.inf)


def _slab(o: np.ndarray, d: np.ndarray, lo: float, hi: float) -> tuple[np.ndarray, np.ndarray]:
    """Parameter interval where o + t d lies in [lo, hi]."""
    par = d == 0
    inside = (o >= lo) & (o <= hi)
    safe = np.where(par, 1.0, d)
    t1, t2 = (lo - o) / safe, (hi - o) / safe
    a, b = np.minimum(t1, t2), np.maximum(t1, t2)
    a = np.where(par, np.where(inside, -np.inf, np.inf), a)
    b = np.where(par, np.where(inside, np.inf, -np.inf), b)
    return a, b


def _disk(o: np.ndarray, d: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Parameter interval where the xy projection of the ray is inside the circle."""
    a = (d * d).sum(axis=1)
    b = 2 * (o * d).sum(axis=1)
    c = (o * o).sum(axis=1) - radius**2
    par = a == 0
    safe = np.where(par, 1.0, a)
    disc = b * b - 4 * safe * c
    root = np.sqrt(np.maximum(disc, 0.0))
    t1 = (-b - root) / (2 * safe)
    t2 = (-b + root) / (2 * safe)
    miss = disc < 0
    t1 = np.where(miss, np.inf, t1)
    t2 = np.where(miss, -np.inf, t2)
    t1 = np.where(par, np.where(c <= 0, -np.inf, np.inf), t1)
    t2 = np.where(par, np.where(c <= 0, np.inf, -np.inf), t2)
    return t1, t2


@dataclass
class Scene:
    objects: list[SceneObject] = field(default_factory=list)
    seed: int = 0

    def validate(self, spec: CartGridSpec, num_classes: int) -> None:
        for i, ob in enumerate(self.objects):
            if ob.cls > num_classes:
                raise ValueError(f"object {i}: class {ob.cls} exceeds class count {num_classes}")
            if ob.shape == "ground-plane":
                continue
            cx, cy, _ = ob.center
            if ob.yaw:
                rx = ry = np.hypot(ob.size[0], ob.size[1]) / 2
            else:
                rx, ry = ob.size[0] / 2, ob.size[1] / 2
            if cx - rx < spec.x_min or cx + rx > spec.x_max or cy - ry < spec.y_min or cy + ry > spec.y_max:
                raise ValueError(f"object {i} ({ob.shape}) extends outside the Cartesian range")

    def to_text(self) -> str:
        lines = [f"# seed {self.seed}", "# shape class cx cy cz sx sy sz yaw"]
        for ob in self.objects:
            vals = [*ob.center, *ob.size, ob.yaw]
            lines.append(" ".join([ob.shape, str(ob.cls)] + [repr(float(v)) for v in vals]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<scene>") -> "Scene":
        seed = 0
        objects = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "seed":
                    seed = int(parts[1])
                continue
            if not line:
                continue
            parts = line.split()
            if len(parts) != 9:
                raise ValueError(f"{source}:{lineno}: expected 9 fields, got {len(parts)}")
            try:
                vals = [float(v) for v in parts[2:]]
                objects.append(SceneObject(parts[0], int(parts[1]), tuple(vals[:3]), tuple(vals[3:6]), vals[6]))
            except ValueError as exc:
                raise ValueError(f"{source}:{lineno}: {exc}") from None
        return cls(objects, seed)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "Scene":
        return cls.from_text(Path(path).read_text(), str(path))


def make_gt(scene: Scene, spec: CartGridSpec, num_classes: int = 4) -> OccGrid:
    """Label each voxel with the last-listed object containing its center."""
    centers = spec.centers()
    labels = np.zeros(spec.shape, dtype=np.uint8)
    for ob in scene.objects:
        if ob.cls > num_classes:
            raise ValueError(f"make_gt: class {ob.cls} exceeds class count {num_classes}")
        labels[ob.contains(centers)] = ob.cls
    return OccGrid(labels, num_classes)


def cast(scene: Scene, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit per ray: (t, class id); t = inf and class 0 on a miss.

    On exact ties the earlier-listed object wins.
    """
    n = len(dirs)
    best = np.full(n, np.inf)
    cls = np.zeros(n, dtype=np.int64)
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), (n, 3))
    for ob in scene.objects:
        t = ob.intersect(origins, dirs)
        closer = t < best
        best = np.where(closer, t, best)
        cls = np.where(closer, ob.cls, cls)
    return best, cls


def lidar_directions(n_beams: int, n_azimuth: int, elev_min_deg: float = -35.0, elev_max_deg: float = 10.0) -> np.ndarray:
    """Unit ray directions, beam-major: (n_beams * n_azimuth, 3)."""
    elev = np.radians(np.linspace(elev_min_deg, elev_max_deg, n_beams))
    az = -np.pi + 2 * np.pi * np.arange(n_azimuth) / n_azimuth
    e, a = np.meshgrid(elev, az, indexing="ij")
    return np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1).reshape(-1, 3)


def render_lidar(
    scene: Scene,
    n_beams: int = 20,
    n_azimuth: int = 360,
    noise_sd: float = 0.0,
    max_range: float = 30.0,
    origin: Sequence[float] = (0.0, 0.0, 0.0),
    elev_range: tuple[float, float] = (-35.0, 10.0),
) -> PointCloud:
    """Spinning-LiDAR returns with features (x, y, z, 1).

    Range noise is one seeded Gaussian draw per lattice ray, taken before
    misses are dropped, so a ray's noise never depends on the scene content.
    """
    dirs = lidar_directions(n_beams, n_azimuth, *elev_range)
    o = np.asarray(origin, dtype=np.float64)
    t, _ = cast(scene, o, dirs)
    noise = np.random.default_rng(scene.seed).normal(0.0, 1.0, len(dirs)) * noise_sd if noise_sd > 0 else 0.0
    keep = t <= max_range
    rng_t = (t + noise)[keep] if noise_sd > 0 else t[keep]
    pts = o + dirs[keep] * rng_t[:, None]
    feats = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    return PointCloud(pts, feats)


def class_colors(num_classes: int) -> np.ndarray:
    """(num_classes + 1, 3) base colors; row 0 is the background."""
    rows = [np.asarray(BACKGROUND, dtype=np.float64)]
    rows += [PALETTE[(c - 1) % len(PALETTE)] for c in range(1, num_classes + 1)]
    return np.stack(rows)


def shade(cls: np.ndarray, dist: np.ndarray, num_classes: int) -> np.ndarray:
    """uint8 colors: class base color darkened in 5 m distance bands."""
    base = class_colors(num_classes)[cls]
    band = np.floor(np.where(np.isfinite(dist), dist, 0.0) / 5.0)
    factor = np.where(cls > 0, np.clip(1.0 - 0.12 * band, 0.4, 1.0), 1.0)
    return np.round(base * factor[..., None]).astype(np.uint8)


def camera_rays(cam: CameraModel) -> np.ndarray:
    """Ego-frame unit directions through every pixel center, (H, W, 3)."""
    us, vs = np.meshgrid(np.arange(cam.width) + 0.5, np.arange(cam.height) + 0.5)
    rays = cam.pixel_rays(us, vs) @ cam.rotation
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def render_images(scene: Scene, cams: Sequence[CameraModel], num_classes: int = 4) -> np.ndarray:
    """(N_cam, 3, H, W) uint8 images of the nearest-hit class colors."""
    out = []
    for cam in cams:
        dirs = camera_rays(cam).reshape(-1, 3)
        t, cls = cast(scene, cam.center, dirs)
        img = shade(cls, t, num_classes).reshape(cam.height, cam.width, 3)
        out.append(img.transpose(2, 0, 1))
    return np.stack(out) if out else np.zeros((0, 3, 0, 0), dtype=np.uint8)


def images_to_float(images: np.ndarray) -> np.ndarray:
    return np.asarray(images, dtype=np.float64) / 255.0


# ---------------------------------------------------------------- random scenes


def _center_coords(lo: float, hi: float, n: int) -> np.ndarray:
    step = (hi - lo) / n
    return lo + (np.arange(n) + 0.5) * step


def random_scene(seed: int, spec: CartGridSpec | None = None, num_classes: int = 4) -> Scene:
    """Ground, vehicles, poles and buildings with faces on voxel-center planes.

    Class ids are 1 ground, 2 vehicle, 3 pole, 4 building (clipped to the
    class count).  Objects keep clear of a 2 m square around the sensors.
    """
    spec = spec or CartGridSpec()
    rng = np.random.default_rng(seed)
    xs = _center_coords(spec.x_min, spec.x_max, spec.nx)
    ys = _center_coords(spec.y_min, spec.y_max, spec.ny)
    zs = _center_coords(spec.z_min, spec.z_max, spec.nz)
    vx, vy, _ = spec.voxel_size
    floor_z, top_z = zs[0], zs[-1]
    cl = lambda c: min(c, num_classes)  # noqa: E731

    objects = [
        SceneObject("ground-plane", cl(1), (0.0, 0.0, (spec.z_min + floor_z) / 2), (0.0, 0.0, floor_z - spec.z_min))
    ]

    def clear(x0, x1, y0, y1):
        return x1 < -2 or x0 > 2 or y1 < -2 or y0 > 2

    def place_box(cls, nx_rng, ny_rng, z1):
        for _ in range(100):
            nx_ = int(rng.integers(*nx_rng))
            ny_ = int(rng.integers(*ny_rng))
            i = int(rng.integers(0, len(xs) - nx_))
            j = int(rng.integers(0, len(ys) - ny_))
            x0, x1, y0, y1 = xs[i], xs[i + nx_], ys[j], ys[j + ny_]
            if clear(x0, x1, y0, y1):
                objects.append(
                    SceneObject("box", cls, ((x0 + x1) / 2, (y0 + y1) / 2, (floor_z + z1) / 2), (x1 - x0, y1 - y0, z1 - floor_z))
                )
                return

    radius = 0.48 * min(vx, vy)
    for _ in range(int(rng.integers(1, 3))):
        place_box(cl(4), (4, 9), (4, 9), top_z)
    for _ in range(int(rng.integers(2, 5))):
        place_box(cl(2), (3, 8), (3, 5), floor_z + 2 * spec.voxel_size[2])
    for _ in range(int(rng.integers(2, 5))):
        for _ in range(100):
            x, y = xs[int(rng.integers(0, len(xs)))], ys[int(rng.integers(0, len(ys)))]
            if clear(x - radius, x + radius, y - radius, y + radius):
                z1 = zs[-2]
                objects.append(SceneObject("cylinder", cl(3), (x, y, (floor_z + z1) / 2), (2 * radius, 2 * radius, z1 - floor_z)))
                break
    return Scene(objects, seed)
