"""Command-line surface: gen-scene, train, infer, fuse, eval.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command logs the fully resolved configuration it ran with; all
randomness is seeded.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_run_config, resolved_dict
from .fusion import fuse, save_fusion_report
from .geometry import GeometryError, sample_inverse_depth
from .inference import (DepthEstimate, TrainingDiverged, infer_depth,
                        load_depth_map, save_depth_map, train)
from .metrics import evaluate
from .network import DepthNetwork
from .params import CheckpointError
from .ply import load_ply, save_ply
from .scenes import generate_scene, load_scene, save_scene
from .tensor import NonFiniteError

log = logging.getLogger("sweepstereo")

_USAGE_EXIT = 1
_DATA_EXIT = 2
_NUMERIC_EXIT = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; the contract wants 1
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(_USAGE_EXIT)


def _log_config(cfg: RunConfig) -> None:
    log.info("resolved config: %s", json.dumps(resolved_dict(cfg), sort_keys=True))


def _load_scene_dirs(path: Path) -> list:
    """A scene directory, or a directory of scene directories."""
    if (path / "manifest.json").exists():
        return [load_scene(path)]
    subs = sorted(p for p in path.iterdir() if (p / "manifest.json").exists())
    if not subs:
        raise GeometryError(f"{path}: no scene manifest found")
    return [load_scene(p) for p in subs]


def _cmd_gen_scene(args) -> int:
    overrides = {"scene": {}}
    if args.spec is not None:
        try:
            spec_doc = json.loads(Path(args.spec).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read scene spec {args.spec}: {e}") from e
        if not isinstance(spec_doc, dict):
            raise ConfigError(f"{args.spec}: scene spec must be a JSON object")
        overrides["scene"].update(spec_doc)
    if args.views is not None:
        overrides["scene"]["n_views"] = args.views
    cfg = load_run_config(args.config, overrides)
    _log_config(cfg)
    scene = generate_scene(cfg.scene, seed=args.seed)
    save_scene(scene, args.out)
    log.info("scene with %d views written to %s", len(scene.views), args.out)
    return 0


def _cmd_train(args) -> int:
    overrides = {"training": {}, "network": {}}
    if args.epochs is not None:
        overrides["training"]["epochs"] = args.epochs
    if args.seed is not None:
        overrides["training"]["seed"] = args.seed
        overrides["network"]["seed"] = args.seed
    if args.ablate_nonlocal:
        overrides["network"]["nonlocal_enabled"] = False
    cfg = load_run_config(args.config, overrides)
    _log_config(cfg)

    scenes = _load_scene_dirs(Path(args.scenes))
    network = DepthNetwork(cfg.network)
    out = Path(args.out)
    loss_csv = Path(args.loss_csv) if args.loss_csv else out.with_suffix(out.suffix + ".loss.csv")

    start_epoch = 0
    if args.resume:
        if not out.exists():
            raise CheckpointError(f"--resume given but {out} does not exist")
        network.load(out)
        if loss_csv.exists():
            rows = [r for r in loss_csv.read_text().splitlines()[1:] if r.strip()]
            if rows:
                start_epoch = int(rows[-1].split(",")[0]) + 1

    mode = "a" if args.resume and loss_csv.exists() else "w"
    with open(loss_csv, mode) as f:
        if mode == "w":
            f.write("epoch,loss\n")

        def on_epoch(epoch, loss):
            f.write(f"{start_epoch + epoch},{loss:.8g}\n")
            f.flush()
            log.info("epoch %d: loss %.6g", start_epoch + epoch, loss)

        train(network, scenes, cfg.training, on_epoch=on_epoch)
    network.save(out)
    out.with_suffix(out.suffix + ".config.json").write_text(
        json.dumps(resolved_dict(cfg), indent=2) + "\n")
    log.info("checkpoint written to %s", out)
    return 0


def _network_for_checkpoint(ckpt: Path, config_path, overrides) -> tuple[DepthNetwork, RunConfig]:
    sidecar = ckpt.with_suffix(ckpt.suffix + ".config.json")
    if config_path is None and sidecar.exists():
        config_path = sidecar
    cfg = load_run_config(config_path, overrides)
    network = DepthNetwork(cfg.network)
    network.load(ckpt)
    return network, cfg


def _cmd_infer(args) -> int:
    overrides = {"inference": {}}
    if args.depth_planes is not None:
        overrides["inference"]["depth_planes"] = args.depth_planes
    network, cfg = _network_for_checkpoint(Path(args.ckpt), args.config, overrides)
    _log_config(cfg)
    scene = load_scene(Path(args.scene))
    if not 0 <= args.ref < len(scene.views):
        raise GeometryError(f"--ref {args.ref} out of range ({len(scene.views)} views)")
    est = infer_depth(scene.views, args.ref, network, cfg.inference.depth_planes)
    save_depth_map(args.out, est.depth, est.probability)
    log.info("depth map for view %d written to %s", args.ref, args.out)
    return 0


def _cmd_fuse(args) -> int:
    overrides = {"fusion": {}, "threads": max(1, args.threads)}
    if args.mode is not None:
        overrides["fusion"]["mode"] = args.mode
    if args.tau is not None:
        overrides["fusion"]["fixed_tau"] = args.tau
    cfg = load_run_config(args.config, overrides)
    _log_config(cfg)
    scene = load_scene(Path(args.scene))
    depth_dir = Path(args.depths)
    estimates = []
    for i in range(len(scene.views)):
        path = depth_dir / f"depth_{i:04d}.nr2d"
        if not path.exists():
            raise GeometryError(f"missing depth map for view {i}: {path}")
        depth, prob = load_depth_map(path)
        estimates.append(DepthEstimate(depth=depth, probability=prob,
                                       plane_index=np.zeros(depth.shape, dtype=np.int64)))
    cloud = fuse(scene.views, estimates, cfg.fusion, workers=cfg.threads)
    if len(cloud) == 0:
        log.warning("no pixels passed fusion; writing an empty cloud")
    save_ply(args.out, cloud.points, cloud.colors, binary=not args.ascii)
    if args.report:
        save_fusion_report(args.report, cloud, cfg.fusion)
    log.info("fused %d points into %s", len(cloud), args.out)
    return 0


def _default_cap(scene, depth_planes: int, factor: float) -> float:
    depths = np.concatenate([d[m] for d, m in zip(scene.gt_depth, scene.gt_mask)])
    median = float(np.median(depths)) if len(depths) else 0.5 * (
        scene.views[0].d_min + scene.views[0].d_max)
    hyps = sample_inverse_depth(scene.views[0].d_min, scene.views[0].d_max, depth_planes)
    return factor * hyps.spacing_at(median)


def _cmd_eval(args) -> int:
    cfg = load_run_config(args.config, {})
    _log_config(cfg)
    scene = load_scene(Path(args.gt))
    if len(scene.gt_cloud) == 0:
        raise GeometryError(f"{args.gt}: no ground-truth cloud")
    points, _ = load_ply(args.cloud)
    cap = args.cap if args.cap is not None else cfg.evaluation.cap
    if cap is None:
        cap = _default_cap(scene, cfg.inference.depth_planes,
                           cfg.evaluation.cap_spacing_factor)
    metrics = evaluate(points, scene.gt_cloud, cap)
    report = metrics.as_dict()
    Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    log.info("Acc. %.6g  Comp. %.6g  Overall %.6g (cap %.6g)",
             metrics.accuracy, metrics.completeness, metrics.overall, cap)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sweepstereo",
                     description="Plane-sweep multi-view stereo with recurrent "
                                 "cost regularization and dynamic fusion.")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    parser.add_argument("--threads", type=int, default=1,
                        help="bound on internal worker count")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic scene with ground truth")
    p.add_argument("--spec", help="JSON file with scene-spec fields")
    p.add_argument("--out", required=True, help="output scene directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--views", type=int, help="override the number of views")
    p.add_argument("--config", help="run-config JSON")
    p.set_defaults(func=_cmd_gen_scene)

    p = sub.add_parser("train", help="train the depth network on scenes")
    p.add_argument("--scenes", required=True, help="scene directory (or parent of many)")
    p.add_argument("--config", help="run-config JSON")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv", help="loss log path (default: <out>.loss.csv)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true", help="continue from --out")
    p.add_argument("--ablate-nonlocal", action="store_true",
                   help="disable the non-local recurrence (baseline model)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="infer a depth map for one reference view")
    p.add_argument("--scene", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ref", type=int, required=True)
    p.add_argument("--D", dest="depth_planes", type=int, help="number of depth planes")
    p.add_argument("--out", required=True, help="output depth-map file")
    p.add_argument("--config", help="run-config JSON (default: checkpoint sidecar)")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("fuse", help="fuse per-view depth maps into a point cloud")
    p.add_argument("--scene", required=True)
    p.add_argument("--depths", required=True, help="directory with depth_XXXX.nr2d files")
    p.add_argument("--mode", choices=["dynamic", "fixed"])
    p.add_argument("--tau", type=float, help="fixed-mode probability threshold")
    p.add_argument("--out", required=True, help="output PLY path")
    p.add_argument("--ascii", action="store_true", help="write ASCII PLY")
    p.add_argument("--report", help="write a fusion report JSON")
    p.add_argument("--config", help="run-config JSON")
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("eval", help="distance metrics of a cloud against scene GT")
    p.add_argument("--cloud", required=True, help="reconstructed PLY")
    p.add_argument("--gt", required=True, help="scene directory with ground truth")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--cap", type=float, help="distance cap (default: from spacing)")
    p.add_argument("--config", help="run-config JSON")
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except (TrainingDiverged, NonFiniteError) as e:
        log.error("numerical failure: %s", e)
        return _NUMERIC_EXIT
    except (ValueError, OSError) as e:  # config/data/geometry/file errors
        log.error("%s", e)
        return _DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
