"""Command-line interface: synth, train, eval, run, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, PipelineConfig, load_config
from .formats import FormatError, read_grid, read_pointcloud, read_ppm, read_weights, write_grid, write_pointcloud, write_ppm, write_weights
from .head import OccGrid
from .metrics import confusion, metrics_json

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
SCENE_NAMES = ("ground", "vehicle", "pole", "building")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class CheckFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def class_names(num_classes: int) -> list[str]:
    if num_classes == len(SCENE_NAMES):
        return list(SCENE_NAMES)
    return [f"class_{c}" for c in range(1, num_classes + 1)]


def _overrides(pairs: Sequence[str] | None) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args, **flags) -> PipelineConfig:
    values = _overrides(getattr(args, "set", None))
    values.update({k: v for k, v in flags.items() if v is not None})
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    return load_config(args.config, values)


def scene_dirs(root: Path) -> list[Path]:
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "lidar.ocpc").exists())


def _require(path: Path) -> Path:
    if not path.is_file():
        raise DataError(f"{path}: missing file")
    return path


def load_scene_dir(path: Path, cfg: PipelineConfig, need_gt: bool = True):
    """Sensor files (and gt.ocgr) of one scene directory -> SceneInputs, unprepared."""
    from .pipeline import SceneInputs
    from .synthetic import images_to_float

    lidar = read_pointcloud(_require(path / "lidar.ocpc"))
    if lidar.channels != 4:
        raise DataError(f"{path / 'lidar.ocpc'}: expected 4 feature channels (x, y, z, 1), got {lidar.channels}")
    imgs = []
    for i in range(cfg.n_cams):
        f = _require(path / f"cam{i}.ppm")
        img = read_ppm(f)
        if img.shape[1:] != (cfg.image_h, cfg.image_w):
            raise DataError(f"{f}: image is {img.shape[2]}x{img.shape[1]}, config expects {cfg.image_w}x{cfg.image_h}")
        imgs.append(img)
    gt = None
    if need_gt:
        gt = read_grid(_require(path / "gt.ocgr"))
        _check_grid(path / "gt.ocgr", gt, cfg)
    return SceneInputs(images_to_float(np.stack(imgs)), lidar, gt=gt)


def _check_grid(path: Path, grid: OccGrid, cfg: PipelineConfig) -> None:
    if grid.shape != cfg.cart.shape:
        raise DataError(f"{path}: grid {grid.shape} does not match config {cfg.cart.shape}")
    if grid.num_classes != cfg.num_classes:
        raise DataError(f"{path}: {grid.num_classes} classes, config has {cfg.num_classes}")


def load_checkpoint(path: Path, cfg: PipelineConfig):
    from .pipeline import init_params

    params = init_params(cfg)
    try:
        params.load_arrays(read_weights(_require(path)))
    except (KeyError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise DataError(f"{path}: checkpoint does not match config: {exc}") from None
    return params


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from .synthetic import make_gt, random_scene, render_images, render_lidar

    cfg = _config(args)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"{out}: cannot create output directory: {exc}") from None
    cams = cfg.cameras()
    for i in range(args.scenes):
        scene = random_scene(args.seed + i, cfg.cart, cfg.num_classes)
        d = out / f"scene_{i:04d}"
        d.mkdir(exist_ok=True)
        scene.save(d / "scene.txt")
        write_pointcloud(d / "lidar.ocpc", render_lidar(scene, cfg.lidar_beams, cfg.lidar_azimuths, cfg.lidar_noise))
        for ci, img in enumerate(render_images(scene, cams, cfg.num_classes)):
            write_ppm(d / f"cam{ci}.ppm", img)
        write_grid(d / "gt.ocgr", make_gt(scene, cfg.cart, cfg.num_classes))
    print(f"wrote {args.scenes} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import Geometry, NonFiniteLossError, init_params, train

    cfg = _config(args, **{"train.steps": args.steps, "train.seed": args.seed})
    dirs = scene_dirs(Path(args.data))
    if not dirs:
        raise DataError(f"{args.data}: no scene directories")
    geom = Geometry.build(cfg)
    dataset = [load_scene_dir(d, cfg).prepare(cfg, geom) for d in dirs]
    params = init_params(cfg)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".jsonl")
    with open(log_path, "w") as log:
        def emit(line):
            log.write(line + "\n")
            if args.verbose:
                print(line)

        try:
            reports = train(cfg, params, geom, dataset, log=emit)
        except NonFiniteLossError as exc:
            raise CheckFailure(str(exc)) from None
    write_weights(out, params.arrays())
    if reports:
        print(f"trained {len(reports)} steps on {len(dataset)} scenes: total {reports[0].total:.4f} -> {reports[-1].total:.4f}")
    print(f"checkpoint {out}, log {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline import Geometry, predict

    cfg = _config(args)
    dirs = scene_dirs(Path(args.data))
    if not dirs:
        raise DataError(f"{args.data}: no scene directories")
    stats = None
    if args.pred:
        for d in dirs:
            gt = read_grid(_require(d / "gt.ocgr"))
            _check_grid(d / "gt.ocgr", gt, cfg)
            pred = read_grid(_require(d / args.pred))
            _check_grid(d / args.pred, pred, cfg)
            s = confusion(pred, gt)
            stats = s if stats is None else stats + s
    else:
        params = load_checkpoint(Path(args.ckpt), cfg)
        geom = Geometry.build(cfg)
        for d in dirs:
            data = load_scene_dir(d, cfg).prepare(cfg, geom)
            s = confusion(predict(cfg, params, geom, data), data.gt)
            stats = s if stats is None else stats + s
    text = metrics_json(stats, class_names(cfg.num_classes))
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


def cmd_run(args) -> int:
    from .pipeline import Geometry, predict

    cfg = _config(args)
    params = load_checkpoint(Path(args.ckpt), cfg)
    geom = Geometry.build(cfg)
    scene = Path(args.scene)
    if not scene.is_dir():
        raise DataError(f"{scene}: not a directory")
    data = load_scene_dir(scene, cfg, need_gt=False).prepare(cfg, geom)
    grid = predict(cfg, params, geom, data)
    write_grid(args.out, grid)
    print(f"wrote {args.out}: {int((grid.labels > 0).sum())} occupied voxels")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_suite

    def show(res):
        if args.verbose or not res.passed:
            print(res.line())

    results = run_suite(range(args.seeds), end_to_end=not args.skip_end_to_end, progress=show)
    failed = [r for r in results if not r.passed]
    print(f"gradcheck: {len(results) - len(failed)}/{len(results)} passed")
    if failed:
        raise CheckFailure(f"{len(failed)} gradient checks failed")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cylocc", description="Cylindrical camera-LiDAR occupancy toy pipeline.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")

    s = sub.add_parser("synth", help="generate synthetic scenes")
    s.add_argument("--scenes", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train on a scene directory")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path (OCWT)")
    s.add_argument("--log", help="JSON-lines log path (default: checkpoint path with .jsonl suffix)")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("-v", "--verbose", action="store_true")
    common(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="print metrics JSON over a scene directory")
    s.add_argument("--data", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--ckpt", help="checkpoint to run on every scene")
    g.add_argument("--pred", help="per-scene prediction file name (OCGR) to score instead")
    s.add_argument("--out", help="also write the metrics JSON here")
    common(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("run", help="predict one scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True, help="output grid path (OCGR)")
    common(s)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("gradcheck", help="run the op, loss and stage gradient checks")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--skip-end-to-end", action="store_true")
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        if getattr(args, "scenes", 0) < 0:
            raise UsageError("--scenes must be >= 0")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:  # malformed scene text, bad labels
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
