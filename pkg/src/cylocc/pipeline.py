"""End-to-end forward pass, training step and evaluation over synthetic scenes."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Params, Tensor
from .camera import (
    DepthTargets,
    bin_geometry,
    depth_head,
    depth_targets,
    fuse_context,
    init_camera_params,
    lift_pseudo_cloud,
    toy_backbone,
)
from .config import PipelineConfig
from .encdec import LEVELS, init_encdec_params, shared_encode_decode
from .geometry import CameraModel
from .head import OccGrid, classify, init_head_params, logits_to_grid, plane_coords, sample_tpv_to_volume
from .lidar import SamplingPlan, init_lidar_params, lidar_branch, plan_semantic_sampling
from .losses import LossReport, label_pyramid, total_loss
from .metrics import ConfusionStats, confusion
from .pointcloud import PointCloud
from .synthetic import Scene, images_to_float, make_gt, random_scene, render_images, render_lidar
from .tpv import dynamic_fuse, init_fusion_params, init_group_pool_params, spatial_group_pool
from .voxelizer import assign_voxels, voxelize

RAW_LIDAR_CHANNELS = 4  # x, y, z, 1


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage


class NonFiniteLossError(FloatingPointError):
    def __init__(self, report: LossReport):
        parts = ", ".join(f"{k}={v}" for k, v in report.record(-1).items() if k != "step")
        super().__init__(f"non-finite training loss: {parts}")
        self.report = report


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage attached
        raise StageError(name, exc) from exc


def init_params(cfg: PipelineConfig, seed: int | None = None) -> Params:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    p = Params()
    c, c1, c2 = cfg.channels, cfg.geo_channels, cfg.sem_channels
    init_camera_params(p, c2, cfg.depth_bins, rng)
    init_lidar_params(p, RAW_LIDAR_CHANNELS, c1, c2, c, rng)
    init_group_pool_params(p, "pool.cam", c2, cfg.group_count, rng, out_channels=c)
    init_group_pool_params(p, "pool.lidar", c, cfg.group_count, rng)
    init_fusion_params(p, c, rng)
    init_encdec_params(p, c, rng)
    init_head_params(p, c, cfg.num_classes, rng)
    return p


@dataclass
class Geometry:
    """Scene-independent constants derived from a config."""

    cams: list[CameraModel]
    bin_points: np.ndarray  # (N_cam, K, H, W, 3)
    bin_coords: np.ndarray
    pseudo_voxels: np.ndarray  # flat cylindrical voxel id per pseudo point, -1 if outside
    head_coords: list[dict]  # per scale, plane lookup coordinates of Cartesian voxel centers

    @classmethod
    def build(cls, cfg: PipelineConfig) -> "Geometry":
        cams = cfg.cameras()
        fh, fw = cfg.feat_hw
        pts, coords = bin_geometry(cams, fh, fw, cfg.depth_bins, cfg.depth_interval)
        vox = assign_voxels(pts.reshape(-1, 3), cfg.cyl)
        head = [plane_coords(cfg.cart.downscaled(l), cfg.cyl.downscaled(l)) for l in range(LEVELS)]
        return cls(cams, pts, coords, vox, head)


@dataclass
class SceneInputs:
    """Sensor data for one scene plus everything derivable without parameters."""

    images: np.ndarray  # (N_cam, 3, H0, W0) float in [0, 1]
    lidar: PointCloud
    lidar_voxels: np.ndarray | None = None
    plan: SamplingPlan | None = None
    targets: DepthTargets | None = None
    gt: OccGrid | None = None
    gt_pyramid: list[np.ndarray] | None = None

    def prepare(self, cfg: PipelineConfig, geom: Geometry) -> "SceneInputs":
        fh, fw = cfg.feat_hw
        if self.lidar_voxels is None:
            self.lidar_voxels = assign_voxels(self.lidar.positions, cfg.cyl)
        if self.plan is None:
            self.plan = plan_semantic_sampling(self.lidar.positions, geom.cams, fh, fw)
        if self.targets is None:
            self.targets = depth_targets(self.lidar.positions, geom.cams, fh, fw, cfg.depth_bins, cfg.depth_interval)
        if self.gt is not None and self.gt_pyramid is None:
            self.gt_pyramid = label_pyramid(self.gt.labels, cfg.num_classes, LEVELS)
        return self


def synthesize(cfg: PipelineConfig, scene: Scene, geom: Geometry | None = None, with_gt: bool = True) -> SceneInputs:
    cams = geom.cams if geom is not None else cfg.cameras()
    images = render_images(scene, cams, cfg.num_classes)
    lidar = render_lidar(scene, cfg.lidar_beams, cfg.lidar_azimuths, cfg.lidar_noise)
    gt = make_gt(scene, cfg.cart, cfg.num_classes) if with_gt else None
    return SceneInputs(images_to_float(images), lidar, gt=gt)


def make_dataset(cfg: PipelineConfig, seeds: Iterable[int], geom: Geometry) -> list[SceneInputs]:
    return [synthesize(cfg, random_scene(s, cfg.cart, cfg.num_classes), geom).prepare(cfg, geom) for s in seeds]


@dataclass
class PipelineOutput:
    scale_logits: list[Tensor]  # per scale, (X_l, Y_l, Z_l, Cls + 1)
    grid: OccGrid
    depth: Tensor
    intermediates: dict = field(default_factory=dict)


def run_pipeline(
    images,
    lidar: PointCloud,
    cfg: PipelineConfig,
    params: Params,
    geom: Geometry | None = None,
    inputs: SceneInputs | None = None,
) -> PipelineOutput:
    """Camera and LiDAR inputs -> multi-scale occupancy logits and the scale-0 grid."""
    geom = geom or Geometry.build(cfg)
    if inputs is None:
        inputs = SceneInputs(np.asarray(images, dtype=np.float64), lidar).prepare(cfg, geom)
    inter: dict = {}
    with stage("toy_backbone"):
        feats = toy_backbone(params, Tensor(np.asarray(images, dtype=np.float64)))
    with stage("depth_head"):
        if feats.shape[0] != len(geom.cams):
            raise ValueError(f"{feats.shape[0]} images for {len(geom.cams)} cameras")
        dh = depth_head(params, feats, geom.bin_points, geom.bin_coords)
    with stage("fuse_context"):
        context = fuse_context(params, feats, dh)
    with stage("lift_pseudo_cloud"):
        pseudo = lift_pseudo_cloud(dh, context)
    with stage("lidar_branch"):
        lidar_pts = lidar_branch(params, lidar, context, geom.cams, inputs.plan)
    with stage("voxelize"):
        cam_vol = voxelize(pseudo, cfg.cyl, geom.pseudo_voxels)
        lidar_vol = voxelize(lidar_pts, cfg.cyl, inputs.lidar_voxels)
    with stage("spatial_group_pool"):
        cam_planes = spatial_group_pool(params, "pool.cam", cam_vol.features, cfg.group_count)
        lidar_planes = spatial_group_pool(params, "pool.lidar", lidar_vol.features, cfg.group_count)
    with stage("dynamic_fuse"):
        fused = dynamic_fuse(params, cam_planes, lidar_planes)
    with stage("shared_encode_decode"):
        scales = shared_encode_decode(params, fused)
    logits = []
    for l in range(LEVELS):
        with stage(f"sample_tpv_to_volume[{l}]"):
            vol = sample_tpv_to_volume(scales[l], cfg.cart.downscaled(l), cfg.cyl.downscaled(l), geom.head_coords[l])
        with stage(f"classify[{l}]"):
            logits.append(classify(params, vol))
    with stage("argmax"):
        grid = logits_to_grid(logits[0], cfg.cart.shape, cfg.num_classes)
    inter.update(
        features=feats, depth=dh, context=context, pseudo_cloud=pseudo, lidar_points=lidar_pts,
        cam_volume=cam_vol, lidar_volume=lidar_vol, cam_planes=cam_planes, lidar_planes=lidar_planes,
        fused=fused, scales=scales,
    )
    return PipelineOutput(logits, grid, dh.depth, inter)


def forward_scene(cfg: PipelineConfig, params: Params, geom: Geometry, data: SceneInputs) -> PipelineOutput:
    return run_pipeline(data.images, data.lidar, cfg, params, geom, data)


def scene_loss(cfg: PipelineConfig, params: Params, geom: Geometry, data: SceneInputs) -> tuple[Tensor, LossReport, PipelineOutput]:
    if data.gt_pyramid is None:
        raise ValueError("scene has no ground truth")
    out = forward_scene(cfg, params, geom, data)
    with stage("total_loss"):
        loss, report = total_loss(out.scale_logits, data.gt_pyramid, out.depth, data.targets, cfg.lam)
    return loss, report, out


def make_optimizer(cfg: PipelineConfig, params: Params) -> SGD:
    return SGD(params, cfg.lr, cfg.momentum, cfg.clip_norm or None)


def train_step(cfg: PipelineConfig, params: Params, opt: SGD, geom: Geometry, data: SceneInputs) -> LossReport:
    """Forward, loss, backward and one optimizer update on a single scene."""
    params.zero_grad()
    loss, report, _ = scene_loss(cfg, params, geom, data)
    if not report.is_finite():
        raise NonFiniteLossError(report)
    ad.backward(loss)
    opt.step()
    return report


def train(
    cfg: PipelineConfig,
    params: Params,
    geom: Geometry,
    dataset: Sequence[SceneInputs],
    steps: int | None = None,
    log=None,
) -> list[LossReport]:
    """Cycle through ``dataset`` in order for ``steps`` updates; ``log`` receives JSON lines."""
    opt = make_optimizer(cfg, params)
    reports = []
    n = cfg.steps if steps is None else steps
    for step in range(n):
        rep = train_step(cfg, params, opt, geom, dataset[step % len(dataset)])
        reports.append(rep)
        if log is not None:
            log(rep.to_json_line(step))
    return reports


def predict(cfg: PipelineConfig, params: Params, geom: Geometry, data: SceneInputs) -> OccGrid:
    with ad.no_grad():
        return forward_scene(cfg, params, geom, data).grid


def evaluate(cfg: PipelineConfig, params: Params, geom: Geometry, dataset: Sequence[SceneInputs]) -> ConfusionStats:
    """Confusion counts pooled over all scenes."""
    stats = None
    for data in dataset:
        s = confusion(predict(cfg, params, geom, data), data.gt)
        stats = s if stats is None else stats + s
    return stats


def mean_loss(cfg: PipelineConfig, params: Params, geom: Geometry, dataset: Sequence[SceneInputs]) -> float:
    with ad.no_grad():
        return float(np.mean([scene_loss(cfg, params, geom, d)[1].total for d in dataset]))
