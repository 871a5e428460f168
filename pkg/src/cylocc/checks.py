"""Finite-difference gradient checks for every op, loss and pipeline stage.

Each case builds ``(fn, inputs)`` from a seeded generator; ``fn`` maps input
Tensors to a scalar.  Vector-valued ops are contracted against fixed random
weights so every output element contributes to the checked gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import GradcheckReport, Params, Tensor, gradcheck, rel_error
from .camera import DepthHeadOutput, DepthTargets, bin_geometry, depth_head, fuse_context, lift_pseudo_cloud, toy_backbone
from .encdec import encode_decode
from .geometry import CartGridSpec, CylGridSpec, make_camera_rig
from .head import classify, plane_coords, sample_tpv_to_volume
from .lidar import extract_geo, fuse_point_features, plan_semantic_sampling, sample_semantic
from .losses import assemble_total, depth_bce, focal_loss, lovasz_softmax, scal_loss
from .pointcloud import PointCloud
from .tpv import TpvPlanes, dynamic_fuse, spatial_group_pool
from .voxelizer import assign_voxels, voxelize

Builder = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[np.ndarray]]]

OP_TOL = 1e-4
SLICE_TOL = 1e-3


@dataclass
class CheckResult:
    group: str
    name: str
    seed: int
    report: GradcheckReport
    note: str = ""

    @property
    def passed(self) -> bool:
        return self.report.passed

    def line(self) -> str:
        extra = f" ({self.note})" if self.note else ""
        return f"{'PASS' if self.passed else 'FAIL'} {self.group}/{self.name} seed={self.seed} {self.report}{extra}"


def _contract(op: Callable[..., Tensor], example: list[np.ndarray], rng) -> Callable[..., Tensor]:
    shape = op(*[Tensor(x) for x in example]).shape
    wts = Tensor(rng.standard_normal(shape))
    return lambda *xs: ad.sum_reduce(op(*xs) * wts)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, x + np.sign(x + 1e-300) * margin, x)


def _op(make, op) -> Builder:
    def build(rng):
        inputs = make(rng)
        return _contract(op, inputs, rng), inputs

    return build


# ---------------------------------------------------------------- ops

OPS: dict[str, Builder] = {
    "add": _op(lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))], lambda a, b: a + b),
    "sub": _op(lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))], lambda a, b: a - b),
    "mul": _op(lambda r: [r.standard_normal((4, 4)), r.standard_normal((4, 4))], lambda a, b: a * b),
    "scale": _op(lambda r: [r.standard_normal((2, 3))], lambda a: ad.scale(a, -1.7)),
    "matmul": _op(lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))], lambda a, b: a @ b),
    "linear": _op(lambda r: [r.standard_normal((4, 3)), r.standard_normal((3, 2)), r.standard_normal(2)], ad.linear),
    "conv2d": _op(
        lambda r: [r.standard_normal((1, 2, 4, 4)), r.standard_normal((3, 2, 3, 3)), r.standard_normal(3)],
        lambda x, w, b: ad.conv2d(x, w, b, stride=1, padding=1),
    ),
    "conv2d_strided_circular": _op(
        lambda r: [r.standard_normal((1, 2, 4, 4)), r.standard_normal((2, 2, 3, 3)), r.standard_normal(2)],
        lambda x, w, b: ad.conv2d(x, w, b, stride=2, padding=1, pad_mode=("zero", "circular")),
    ),
    "relu": _op(lambda r: [_away_from_zero(r, (4, 4))], ad.relu),
    "softplus": _op(lambda r: [r.standard_normal((4, 4)) * 3], ad.softplus),
    "sigmoid": _op(lambda r: [r.standard_normal((4, 4)) * 3], ad.sigmoid),
    "softmax": _op(lambda r: [r.standard_normal((3, 4))], lambda x: ad.softmax(x, axis=1)),
    "log": _op(lambda r: [r.uniform(0.2, 3.0, (4, 4))], ad.log),
    "exp": _op(lambda r: [r.standard_normal((4, 4))], ad.exp),
    "max_reduce": _op(lambda r: [r.standard_normal((4, 3, 2))], lambda x: ad.max_reduce(x, axis=1)),
    "mean_reduce": _op(lambda r: [r.standard_normal((4, 3))], lambda x: ad.mean_reduce(x, axis=0)),
    "sum_reduce": _op(lambda r: [r.standard_normal((2, 3, 2))], lambda x: ad.sum_reduce(x, axis=(0, 2))),
    "concat": _op(lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 1))], lambda a, b: ad.concat([a, b], axis=1)),
    "slice": _op(lambda r: [r.standard_normal((4, 4))], lambda x: x[1:3, ::2]),
    "reshape": _op(lambda r: [r.standard_normal((2, 6))], lambda x: ad.reshape(x, (3, 4))),
    "transpose": _op(lambda r: [r.standard_normal((2, 3, 4))], lambda x: ad.transpose(x, (2, 0, 1))),
    "gather": _op(lambda r: [r.standard_normal((4, 3))], lambda x: ad.gather(x, np.array([3, 0, 3, 1, 1]), axis=0)),
    "broadcast": _op(lambda r: [r.standard_normal((3, 1))], lambda x: ad.broadcast_to(x, (2, 3, 4))),
}


def _bilinear(modes):
    def build(rng):
        coords = np.stack([rng.uniform(-1, 4, 7), rng.uniform(-1.5, 5.5, 7)], axis=1)
        inputs = [rng.standard_normal((3, 4, 2))]
        return _contract(lambda p: ad.bilinear_sample(p, coords, modes), inputs, rng), inputs

    return build


OPS["bilinear_clamp"] = _bilinear(("clamp", "clamp"))
OPS["bilinear_wrap"] = _bilinear(("clamp", "wrap"))


# ---------------------------------------------------------------- losses


def _labels(rng, n, k):
    labels = rng.integers(0, k, n)
    labels[:2] = [0, 1]  # background and one occupied class always present
    return labels


def _loss(kind) -> Builder:
    def build(rng):
        labels = _labels(rng, 6, 3)
        fns = {
            "focal": lambda x: focal_loss(x, labels),
            "lovasz": lambda x: lovasz_softmax(ad.softmax(x, axis=1), labels),
            "scal_geo": lambda x: scal_loss(ad.softmax(x, axis=1), labels, "geo"),
            "scal_sem": lambda x: scal_loss(ad.softmax(x, axis=1), labels, "sem"),
        }
        return fns[kind], [rng.standard_normal((6, 3))]

    return build


def _depth_bce(rng):
    onehot = np.moveaxis(np.eye(3)[rng.integers(0, 3, (1, 2, 2))], -1, 1)
    mask = np.array([[[True, False], [True, True]]])
    tg = DepthTargets(onehot, mask)
    return (lambda x: depth_bce(ad.softmax(x, axis=1), tg)), [rng.standard_normal((1, 3, 2, 2))]


def _assembly(rng):
    def fn(c, d):
        return assemble_total([[c[l, k] for k in range(4)] for l in range(4)], ad.sum_reduce(d))

    return fn, [rng.random((4, 4)), rng.random(1)]


LOSSES: dict[str, Builder] = {
    "focal": _loss("focal"),
    "lovasz": _loss("lovasz"),
    "scal_geo": _loss("scal_geo"),
    "scal_sem": _loss("scal_sem"),
    "depth_bce": _depth_bce,
    "total_assembly": _assembly,
}


# ---------------------------------------------------------------- pipeline stages


def _backbone(rng):
    def op(img, w0, w1):
        p = {"cam.backbone.0.w": w0, "cam.backbone.0.b": Tensor(np.full(2, 0.1)),
             "cam.backbone.1.w": w1, "cam.backbone.1.b": Tensor(np.full(2, 0.1))}
        return toy_backbone(p, img)

    inputs = [rng.random((1, 3, 8, 8)), rng.standard_normal((2, 3, 3, 3)), rng.standard_normal((2, 2, 3, 3))]
    return _contract(op, inputs, rng), inputs


def _small_bins(k=3):
    cams = make_camera_rig(1, 8, 8)
    pts, coords = bin_geometry(cams, 2, 2, k, 1.0)
    return pts, coords


def _depth_head(rng):
    pts, coords = _small_bins()

    def op(feats, w, b):
        return depth_head({"cam.depth.w": w, "cam.depth.b": b}, feats, pts, coords).depth

    inputs = [rng.standard_normal((1, 4, 2, 2)), rng.standard_normal((3, 4, 1, 1)), rng.standard_normal(3)]
    return _contract(op, inputs, rng), inputs


def _fuse_context(rng):
    pts, coords = _small_bins(2)
    cw = Tensor(rng.standard_normal((3, 6, 1, 1)) * 0.1)

    def op(feats, depth, wd, bd):
        p = {"cam.ctx_depth.w": wd, "cam.ctx_depth.b": bd, "cam.ctx_coord.w": cw, "cam.ctx_coord.b": Tensor(np.zeros(3))}
        return fuse_context(p, feats, DepthHeadOutput(depth, coords, pts))

    inputs = [rng.standard_normal((1, 3, 2, 2)), rng.random((1, 2, 2, 2)), rng.standard_normal((3, 2, 1, 1)), rng.standard_normal(3)]
    return _contract(op, inputs, rng), inputs


def _lift(rng):
    pts, coords = _small_bins(2)

    def op(depth, ctx):
        return lift_pseudo_cloud(DepthHeadOutput(depth, coords, pts), ctx).feature_tensor()

    inputs = [rng.random((1, 2, 2, 2)), rng.standard_normal((1, 3, 2, 2))]
    return _contract(op, inputs, rng), inputs


def _extract_geo(rng):
    pos = rng.standard_normal((5, 3))

    def op(feats, w0, b0, w1, b1):
        p = {"lidar.geo.0.w": w0, "lidar.geo.0.b": b0, "lidar.geo.1.w": w1, "lidar.geo.1.b": b1}
        return extract_geo(p, PointCloud(pos, feats))

    inputs = [rng.standard_normal((5, 4)), rng.standard_normal((4, 6)), rng.standard_normal(6),
              rng.standard_normal((6, 3)), rng.standard_normal(3)]
    return _contract(op, inputs, rng), inputs


def _sample_semantic(rng):
    cams = make_camera_rig(2, 16, 8)
    pos = np.concatenate([rng.uniform([2, -2, -1], [6, 2, 1], (4, 3)), rng.uniform([-6, -2, -1], [-2, 2, 1], (3, 3))])
    plan = plan_semantic_sampling(pos, cams, 4, 8)

    def op(ctx):
        return sample_semantic(pos, ctx, cams, plan)

    inputs = [rng.standard_normal((2, 3, 4, 8))]
    return _contract(op, inputs, rng), inputs


def _fuse_points(rng):
    pos = rng.standard_normal((4, 3))

    def op(geo, sem, w0, w1):
        p = {"lidar.fuse.0.w": w0, "lidar.fuse.0.b": Tensor(np.full(5, 0.1)),
             "lidar.fuse.1.w": w1, "lidar.fuse.1.b": Tensor(np.zeros(4))}
        return fuse_point_features(p, geo, sem, pos).feature_tensor()

    inputs = [rng.standard_normal((4, 3)), rng.standard_normal((4, 2)), rng.standard_normal((5, 5)), rng.standard_normal((5, 4))]
    return _contract(op, inputs, rng), inputs


def _voxelize(rng):
    spec = CylGridSpec(0, 4, 2, 4, 2, -1, 1)
    r, th = rng.uniform(0, 3.9, 8), rng.uniform(-np.pi, np.pi, 8)
    pos = np.stack([r * np.cos(th), r * np.sin(th), rng.uniform(-0.9, 0.9, 8)], axis=1)
    ids = assign_voxels(pos, spec)
    inputs = [rng.standard_normal((8, 2))]
    return _contract(lambda f: voxelize(PointCloud(pos, f), spec, ids).features, inputs, rng), inputs


def _group_pool(rng):
    def op(vol, w, b):
        p = {f"pool.{n}.{k}": v for n in ("rd", "dz", "zr") for k, v in (("w", w), ("b", b))}
        planes = spatial_group_pool(p, "pool", vol, 2)
        return ad.concat([ad.reshape(x, (-1,)) for x in planes], axis=0)

    inputs = [rng.standard_normal((2, 4, 4, 2)), rng.standard_normal((4, 2)), rng.standard_normal(2) + 1.0]
    return _contract(op, inputs, rng), inputs


def _dynamic_fuse(rng):
    shapes = [(4, 4, 2), (4, 2, 2), (2, 4, 2)]
    cam = TpvPlanes(*(Tensor(rng.standard_normal(s)) for s in shapes))

    def op(lid_rd, w, b):
        p = {f"fuse.{n}.{k}": v for n in ("rd", "dz", "zr") for k, v in (("w", w), ("b", b))}
        lid = TpvPlanes(lid_rd, Tensor(np.ones((4, 2, 2))), Tensor(np.zeros((2, 4, 2))))
        out = dynamic_fuse(p, cam, lid)
        return ad.concat([ad.reshape(x, (-1,)) for x in out], axis=0)

    inputs = [rng.standard_normal((4, 4, 2)), rng.standard_normal((4, 2)), rng.standard_normal(2)]
    return _contract(op, inputs, rng), inputs


def _encdec(rng):
    from .encdec import init_encdec_params

    p = Params()
    init_encdec_params(p, 2, rng)

    def op(x):
        outs = encode_decode(p, x, ("zero", "circular"))
        return ad.concat([ad.reshape(o, (-1,)) for o in outs], axis=0)

    inputs = [rng.standard_normal((8, 8, 2))]
    return _contract(op, inputs, rng), inputs


def _sample_volume(rng):
    cyl = CylGridSpec(0, 4, 2, 4, 2, -1, 1)
    cart = CartGridSpec(-3, 3, -3, 3, -1, 1, 2, 2, 2)
    coords = plane_coords(cart, cyl)

    def op(rd, dz, zr):
        return sample_tpv_to_volume(TpvPlanes(rd, dz, zr), cart, cyl, coords)

    inputs = [rng.standard_normal((2, 4, 2)), rng.standard_normal((4, 2, 2)), rng.standard_normal((2, 2, 2))]
    return _contract(op, inputs, rng), inputs


def _classify(rng):
    def op(vol, w0, w1):
        p = {"head.0.w": w0, "head.0.b": Tensor(np.full(3, 0.1)), "head.1.w": w1, "head.1.b": Tensor(np.zeros(3))}
        return classify(p, vol)

    inputs = [rng.standard_normal((2, 2, 2, 3)), rng.standard_normal((3, 3)), rng.standard_normal((3, 3))]
    return _contract(op, inputs, rng), inputs


STAGES: dict[str, Builder] = {
    "toy_backbone": _backbone,
    "depth_head": _depth_head,
    "fuse_context": _fuse_context,
    "lift_pseudo_cloud": _lift,
    "extract_geo": _extract_geo,
    "sample_semantic": _sample_semantic,
    "fuse_point_features": _fuse_points,
    "voxelize": _voxelize,
    "spatial_group_pool": _group_pool,
    "dynamic_fuse": _dynamic_fuse,
    "encode_decode": _encdec,
    "sample_tpv_to_volume": _sample_volume,
    "classify": _classify,
}

GROUPS = {"op": OPS, "loss": LOSSES, "stage": STAGES}


def run_case(group: str, name: str, seed: int, tol: float = OP_TOL) -> CheckResult:
    rng = np.random.default_rng(seed)
    fn, inputs = GROUPS[group][name](rng)
    return CheckResult(group, name, seed, gradcheck(fn, inputs, tol=tol))


# ---------------------------------------------------------------- end-to-end slice


def tiny_config():
    from .config import build_config

    return build_config({
        "cart.nx": 16, "cart.ny": 16, "cart.nz": 8, "cart.x_min": -8, "cart.x_max": 8, "cart.y_min": -8, "cart.y_max": 8,
        "cyl.R": 8, "cyl.A": 16, "cyl.Z": 8, "cyl.r_max": 11.4, "depth.K": 4, "depth.d": 2.0, "fusion.M": 2,
        "channels.C": 4, "channels.C1": 4, "channels.C2": 4, "camera.height": 16, "camera.width": 16,
        "lidar.beams": 8, "lidar.azimuths": 90,
    })


def end_to_end_slice(seed: int, n_entries: int = 10, step: float = 1e-5, tol: float = SLICE_TOL) -> CheckResult:
    """Total-loss gradient vs central differences on ``n_entries`` parameter entries.

    Entries are drawn at random from those whose analytic gradient exceeds
    1e-3 in magnitude, so the check is not dominated by rounding noise.
    Entries sitting on a kink (left and right derivatives disagree, e.g. a
    relu fed exactly zero by an empty voxel and a zero bias) have no
    derivative to check; they are skipped and counted.
    """
    from .pipeline import Geometry, init_params, scene_loss, synthesize
    from .synthetic import random_scene

    cfg = tiny_config()
    geom = Geometry.build(cfg)
    params = init_params(cfg, seed)
    data = synthesize(cfg, random_scene(seed, cfg.cart, cfg.num_classes), geom).prepare(cfg, geom)

    params.zero_grad()
    loss, _, _ = scene_loss(cfg, params, geom, data)
    ad.backward(loss)
    candidates = [(name, idx) for name, t in params.items() for idx in np.ndindex(t.shape)
                  if t.grad is not None and abs(t.grad[idx]) > 1e-3]
    grads = {c: params[c[0]].grad[c[1]] for c in candidates}
    base = params.arrays()

    def loss_at(name, idx, delta):
        arrs = {k: v.copy() for k, v in base.items()}
        arrs[name][idx] += delta
        params.load_arrays(arrs)
        with ad.no_grad():
            return scene_loss(cfg, params, geom, data)[1].total

    l0 = loss_at(*candidates[0], 0.0)
    kink_step = 1e-7
    analytic, numeric, picks, skipped = [], [], [], 0
    for i in np.random.default_rng(seed).permutation(len(candidates)):
        if len(picks) == n_entries:
            break
        name, idx = candidates[i]
        right = (loss_at(name, idx, kink_step) - l0) / kink_step
        left = (l0 - loss_at(name, idx, -kink_step)) / kink_step
        if rel_error(np.array(right), np.array(left)) > tol:
            skipped += 1
            continue
        picks.append((name, idx))
        analytic.append(grads[(name, idx)])
        numeric.append((loss_at(name, idx, step) - loss_at(name, idx, -step)) / (2 * step))
    params.load_arrays(base)
    err = rel_error(np.array(analytic), np.array(numeric))
    rep = GradcheckReport([float(err.max())] if err.size else [], tol, [picks[int(err.argmax())]] if err.size else [])
    if len(picks) < n_entries:
        rep.max_rel_errors.append(np.inf)  # not enough differentiable entries is a failure
    return CheckResult("end_to_end", f"slice{n_entries}", seed, rep, f"{skipped} kink entries skipped")


def run_suite(seeds: Iterable[int] = range(5), groups: Iterable[str] = ("op", "loss", "stage"),
              end_to_end: bool = True, progress: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    results = []
    seeds = list(seeds)
    for group in groups:
        for name in GROUPS[group]:
            for seed in seeds:
                res = run_case(group, name, seed)
                results.append(res)
                if progress:
                    progress(res)
    if end_to_end:
        for seed in seeds:
            res = end_to_end_slice(seed)
            results.append(res)
            if progress:
                progress(res)
    return results


__all__ = ["OPS", "LOSSES", "STAGES", "GROUPS", "CheckResult", "run_case", "end_to_end_slice", "run_suite", "tiny_config"]
