"""Command-line entry point.

Subcommands: run (SLAM over a dataset), synth (generate a synthetic
dataset), mesh (extract a mesh from a checkpoint), render (render a view
from a checkpoint), eval (trajectory/mesh metrics), gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 config error, 3 gradcheck
tolerance failure.
"""

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("trislam")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_GRADCHECK = 3


def build_parser():
    p = argparse.ArgumentParser(prog="trislam", description=__doc__)
    p.add_argument("--print-defaults", action="store_true", help="dump the default config and exit")
    p.add_argument("--log-level", default="info", choices=["quiet", "info", "debug"])
    sub = p.add_subparsers(dest="command")

    r = sub.add_parser("run", help="run SLAM over a dataset")
    r.add_argument("config")
    r.add_argument("--out", default="run_out", help="output directory")
    r.add_argument("--seed", type=int, default=None, help="override the config seed")

    s = sub.add_parser("synth", help="generate a synthetic TUM-format dataset")
    s.add_argument("scene", help="scene description file")
    s.add_argument("--out", required=True)
    s.add_argument("--gt-mesh", action="store_true", help="also write gt_mesh.ply")
    s.add_argument("--gt-mesh-voxel", type=float, default=0.01)

    m = sub.add_parser("mesh", help="extract a mesh from a checkpoint")
    m.add_argument("checkpoint")
    m.add_argument("--config", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--voxel", type=float, default=None)
    m.add_argument("--cull-dataset", default=None, help="TUM dir for visibility culling")
    m.add_argument("--no-color", action="store_true")

    d = sub.add_parser("render", help="render color+depth from a checkpoint")
    d.add_argument("checkpoint")
    d.add_argument("--config", required=True)
    d.add_argument("--pose", required=True, help="'tx ty tz qx qy qz qw'")
    d.add_argument("--out", required=True, help="output prefix")

    e = sub.add_parser("eval", help="trajectory / reconstruction metrics")
    e.add_argument("est_trajectory")
    e.add_argument("gt_trajectory")
    e.add_argument("--mesh", default=None)
    e.add_argument("--gt-mesh", default=None)
    e.add_argument("--threshold", type=float, default=0.05)
    e.add_argument("--samples", type=int, default=100_000)
    e.add_argument("--checkpoint", default=None, help="for depth-L1 (with --scene/--config)")
    e.add_argument("--scene", default=None)
    e.add_argument("--config", default=None)
    e.add_argument("--csv", default=None, help="write the metric table as CSV")

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--params", type=int, default=100)
    g.add_argument("--tol", type=float, default=1e-3)
    return p


def _setup_logging(level):
    lvl = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}[level]
    logging.basicConfig(level=lvl, format="%(levelname)s %(name)s: %(message)s")


def cmd_run(args, debug):
    from .config import load_config
    from .datasets import load_tum
    from .evaluation import ate
    from .slam import SlamSystem

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    loss_fh = open(out / "losses.csv", "w", newline="")
    loss_csv = csv.writer(loss_fh)
    loss_csv.writerow(["frame", "phase", "iter", "term", "value"])

    def loss_hook(frame, phase, it, breakdown):
        for term, value in breakdown.as_dict().items():
            loss_csv.writerow([frame, phase, it, term, repr(value)])
        if debug:
            log.debug("frame %d %s iter %d: %s", frame, phase, it, breakdown.as_dict())

    timing_fh = open(out / "timings.csv", "w", newline="")
    timing_csv = csv.writer(timing_fh)
    timing_csv.writerow(["frame", "seconds"])
    times = []

    def timing_hook(frame, seconds):
        timing_csv.writerow([frame, f"{seconds:.6f}"])
        times.append(seconds)

    system = SlamSystem(cfg, loss_hook=loss_hook)
    frames = load_tum(cfg.dataset, depth_scale=cfg.depth_scale)
    traj_path = out / "trajectory.txt"
    try:
        system.run(frames, trajectory_path=traj_path, timing_hook=timing_hook)
    finally:
        loss_fh.close()
        timing_fh.close()
    system.save(out / "checkpoint.bin")
    if times:
        log.info("mean frame processing time: %.3f s over %d frames", np.mean(times), len(times))

    gt_file = Path(cfg.dataset) / "groundtruth.txt"
    if gt_file.exists():
        from .datasets import read_trajectory_file

        est_st, est_poses = read_trajectory_file(traj_path)
        gt_st, gt_poses = read_trajectory_file(gt_file)
        err = ate(est_st, est_poses, gt_st, gt_poses)
        print(f"ATE RMSE: {err.rmse:.6f} m (mean {err.mean:.6f} m, {len(err.errors)} frames)")
    print(f"trajectory: {traj_path}")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_synth(args, debug):
    from .datasets import load_scene, synth_generate
    from .mesher import fill_volume, marching_cubes, write_ply

    scene = load_scene(args.scene)
    poses = synth_generate(scene, args.out)
    print(f"wrote {len(poses)} frames to {args.out}")
    if args.gt_mesh:
        vol = fill_volume(
            scene.sdf, scene.bounds_min, scene.bounds_max, args.gt_mesh_voxel, dtype=np.float64
        )
        mesh = marching_cubes(vol)
        write_ply(Path(args.out) / "gt_mesh.ply", mesh)
        print(f"gt mesh: {Path(args.out) / 'gt_mesh.ply'} ({mesh.faces.shape[0]} faces)")
    return EXIT_OK


def cmd_mesh(args, debug):
    from .config import load_config
    from .field import load_checkpoint
    from .mesher import cull_mesh, mesh_field, write_ply

    cfg = load_config(args.config)
    field, kf_poses = load_checkpoint(args.checkpoint)
    mesh = mesh_field(field, voxel=args.voxel or cfg.mesh_voxel, with_colors=not args.no_color)
    if args.cull_dataset:
        from .datasets import load_tum
        from .pipeline import PoseParams

        by_id = {fid: (q, t) for fid, _, q, t in kf_poses}
        frames = []
        for rec in load_tum(args.cull_dataset, depth_scale=cfg.depth_scale):
            if rec.index in by_id:
                q, t = by_id[rec.index]
                frames.append((PoseParams(q, t).to_pose(), rec.depth))
        mesh = cull_mesh(mesh, frames, cfg.intrinsics(), cfg.truncation)
    write_ply(args.out, mesh)
    print(f"mesh: {args.out} ({mesh.vertices.shape[0]} vertices, {mesh.faces.shape[0]} faces)")
    return EXIT_OK


def cmd_render(args, debug):
    from PIL import Image

    from .config import load_config
    from .field import load_checkpoint
    from .geometry import Pose
    from .render import render_image

    cfg = load_config(args.config)
    field, _ = load_checkpoint(args.checkpoint)
    vals = [float(x) for x in args.pose.split()]
    if len(vals) != 7:
        raise ValueError("--pose expects 'tx ty tz qx qy qz qw'")
    pose = Pose(np.array([vals[6], vals[3], vals[4], vals[5]]), np.array(vals[:3]))
    color, depth = render_image(
        field, pose, cfg.intrinsics(), cfg.n_stratified, cfg.n_importance
    )
    rgb8 = np.clip(np.round(color * 255), 0, 255).astype(np.uint8)
    d16 = np.clip(np.round(depth * cfg.depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(rgb8).save(args.out + "_color.png")
    Image.fromarray(d16).save(args.out + "_depth.png")
    print(f"wrote {args.out}_color.png and {args.out}_depth.png")
    return EXIT_OK


def cmd_eval(args, debug):
    from .datasets import read_trajectory_file
    from .evaluation import accuracy_completion, ate

    rows = []
    est_st, est_poses = read_trajectory_file(args.est_trajectory)
    gt_st, gt_poses = read_trajectory_file(args.gt_trajectory)
    err = ate(est_st, est_poses, gt_st, gt_poses)
    rows += [("ate_rmse_m", err.rmse), ("ate_mean_m", err.mean)]

    if args.mesh and args.gt_mesh:
        from .mesher import read_ply

        metrics = accuracy_completion(
            read_ply(args.mesh),
            read_ply(args.gt_mesh),
            threshold=args.threshold,
            n_samples=args.samples,
        )
        rows += [
            ("accuracy_m", metrics.accuracy),
            ("completion_m", metrics.completion),
            ("completion_ratio", metrics.completion_ratio),
        ]

    if args.checkpoint and args.scene and args.config:
        from .config import load_config
        from .datasets import load_scene
        from .evaluation import depth_l1
        from .field import load_checkpoint

        from .evaluation import scaled_intrinsics

        cfg = load_config(args.config)
        field, _ = load_checkpoint(args.checkpoint)
        scene = load_scene(args.scene)
        eval_intr = scaled_intrinsics(cfg.intrinsics(), cfg.eval_width, cfg.eval_height)
        rows.append(
            (
                "depth_l1_m",
                depth_l1(field, scene, eval_intr, n_poses=cfg.eval_poses, seed=cfg.seed),
            )
        )

    for name, value in rows:
        print(f"{name:>18}: {value:.6f}")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "value"])
            for name, value in rows:
                w.writerow([name, repr(value)])
    return EXIT_OK


def cmd_gradcheck(args, debug):
    from .optim import gradcheck

    report = gradcheck(seed=args.seed, n_params=args.params, tol=args.tol)
    print(report.format_table())
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    debug = args.log_level == "debug"

    if args.print_defaults:
        from .config import default_config_text

        sys.stdout.write(default_config_text())
        return EXIT_OK
    if not args.command:
        parser.print_help()
        return EXIT_CONFIG

    handlers = {
        "run": cmd_run,
        "synth": cmd_synth,
        "mesh": cmd_mesh,
        "render": cmd_render,
        "eval": cmd_eval,
        "gradcheck": cmd_gradcheck,
    }
    from .config import ConfigError

    try:
        return handlers[args.command](args, debug)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (ValueError, RuntimeError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
