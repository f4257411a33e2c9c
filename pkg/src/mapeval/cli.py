"""Command-line front end.

Commands: synth, fuse, render, dmp, ate, rpe, smd, loop-rank.
Configuration precedence is CLI flags > --config JSON file > built-in
defaults; the effective configuration is echoed into every report.  All
commands are deterministic for a fixed configuration (seeds included).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset, fixtures, fusion, loop_eval, metrics
from .render import RenderConfig, render_depth


def _resolve(args, defaults):
    """Merge CLI values over config-file values over defaults."""
    from_file = {}
    if getattr(args, "config", None):
        from_file = json.loads(Path(args.config).read_text())
        unknown = set(from_file) - set(defaults)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
    effective = {}
    for key, default in defaults.items():
        cli_value = getattr(args, key)
        if cli_value is not None:
            effective[key] = cli_value
        elif key in from_file:
            effective[key] = from_file[key]
        else:
            effective[key] = default
    return effective


def _require(cfg, *keys):
    for key in keys:
        if cfg[key] is None:
            raise ValueError(f"missing required option --{key.replace('_', '-')}")


def _write(report, cfg):
    fmt = cfg["format"]
    out = cfg["out"]
    if out is None or out == "-":
        dataset.write_report(report, fmt, sys.stdout)
    else:
        dataset.write_report(report, fmt, out)


def _echo_config(command, cfg):
    return {"command": command, **{k: v for k, v in cfg.items() if v is not None}}


def _load_frames(cfg):
    traj = dataset.load_trajectory(cfg["trajectory"])
    return dataset.FrameSet.from_sequence_dir(
        cfg["sequence"], traj, max_diff=cfg["max_diff"],
        depth_scale=cfg["depth_scale"]), traj


def _fusion_config(cfg):
    return fusion.FusionConfig(voxel_size=cfg["voxel_size"],
                               normal_window=cfg["normal_window"],
                               pixel_stride=cfg["pixel_stride"])


def _render_config(cfg):
    return RenderConfig(min_splat_px=cfg["min_splat_px"],
                        backface_culling=cfg["backface_culling"])


def _read_points(path):
    """First three columns of any whitespace text table ('#' comments)."""
    rows = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) < 3:
            raise dataset.ParseError(
                f"{path}: line {lineno}: expected at least 3 columns")
        try:
            rows.append([float(f) for f in fields[:3]])
        except ValueError:
            raise dataset.ParseError(
                f"{path}: line {lineno}: non-numeric field") from None
    if not rows:
        raise dataset.ParseError(f"{path}: no points found")
    return np.array(rows)


# ---------------------------------------------------------------------------
# Commands


_SYNTH_DEFAULTS = dict(out_dir=None, descriptor=None, depth_scale=5000.0,
                       n_perturbed=0, trans_std=0.02, rot_std=0.01, seed=0)


def cmd_synth(args):
    cfg = _resolve(args, _SYNTH_DEFAULTS)
    _require(cfg, "out_dir")
    if cfg["descriptor"] is None:
        scene, traj, k = fixtures.parse_fixture(fixtures.DEFAULT_DESCRIPTOR)
    else:
        scene, traj, k = fixtures.load_fixture(cfg["descriptor"])
    out = fixtures.write_dataset(scene, traj, k, cfg["out_dir"], cfg["depth_scale"])
    for i in range(cfg["n_perturbed"]):
        spec = fixtures.PerturbSpec(rot_std=cfg["rot_std"],
                                    trans_std=cfg["trans_std"],
                                    seed=cfg["seed"] + i)
        perturbed = fixtures.perturb_trajectory(traj, spec)
        dataset.save_trajectory(perturbed, out / f"est_{i:02d}.txt")
    print(f"wrote {len(traj)} frames to {out}")
    return 0


_FUSE_DEFAULTS = dict(sequence=None, trajectory=None, out=None,
                      voxel_size=0.01, normal_window=1, pixel_stride=1,
                      max_diff=0.02, depth_scale=5000.0)


def cmd_fuse(args):
    cfg = _resolve(args, _FUSE_DEFAULTS)
    _require(cfg, "sequence", "trajectory", "out")
    frames, _ = _load_frames(cfg)
    m = fusion.fuse_sequence(frames, _fusion_config(cfg))
    fusion.save_map(m, cfg["out"])
    print(f"fused {len(frames)} frames into {len(m)} surfels: {cfg['out']}")
    return 0


_RENDER_DEFAULTS = dict(map=None, trajectory=None, index=0, intrinsics=None,
                        out=None, depth_scale=5000.0, min_splat_px=1.0,
                        backface_culling=True)


def cmd_render(args):
    cfg = _resolve(args, _RENDER_DEFAULTS)
    _require(cfg, "map", "trajectory", "intrinsics", "out")
    m = fusion.load_map(cfg["map"])
    traj = dataset.load_trajectory(cfg["trajectory"])
    if not (0 <= cfg["index"] < len(traj)):
        raise ValueError(f"--index {cfg['index']} out of range for trajectory "
                         f"of length {len(traj)}")
    k = dataset.load_intrinsics(cfg["intrinsics"])
    img = render_depth(m, traj.poses[cfg["index"]], k, _render_config(cfg))
    dataset.save_depth(img, cfg["out"], cfg["depth_scale"])
    print(f"rendered frame {cfg['index']} to {cfg['out']}")
    return 0


_DMP_DEFAULTS = dict(sequence=None, trajectory=None, map=None,
                     frame_stride=1, threads=1,
                     voxel_size=0.01, normal_window=1, pixel_stride=1,
                     min_splat_px=1.0, backface_culling=True,
                     max_diff=0.02, depth_scale=5000.0,
                     out=None, format="csv", per_frame_out=None)


def cmd_dmp(args):
    cfg = _resolve(args, _DMP_DEFAULTS)
    _require(cfg, "sequence", "trajectory")
    frames, _ = _load_frames(cfg)
    if cfg["map"] is not None:
        m = fusion.load_map(cfg["map"])
    else:
        m = fusion.fuse_sequence(frames, _fusion_config(cfg))
    report = metrics.dmp(m, frames, _render_config(cfg),
                         frame_stride=cfg["frame_stride"],
                         threads=cfg["threads"])
    report.config = _echo_config("dmp", cfg)
    _write(report, cfg)
    if cfg["per_frame_out"] is not None:
        per_frame = report.per_frame_report()
        per_frame.config = report.config
        dataset.write_report(per_frame, "csv", cfg["per_frame_out"])
    return 0


_ATE_DEFAULTS = dict(est=None, gt=None, max_diff=0.02, out=None, format="csv")


def cmd_ate(args):
    cfg = _resolve(args, _ATE_DEFAULTS)
    _require(cfg, "est", "gt")
    est = dataset.load_trajectory(cfg["est"])
    gt = dataset.load_trajectory(cfg["gt"])
    report = metrics.ate(est, gt, max_diff=cfg["max_diff"])
    report.config = _echo_config("ate", cfg)
    _write(report, cfg)
    return 0


_RPE_DEFAULTS = dict(est=None, gt=None, delta=1, delta_time=None,
                     max_diff=0.02, out=None, format="csv")


def cmd_rpe(args):
    cfg = _resolve(args, _RPE_DEFAULTS)
    _require(cfg, "est", "gt")
    est = dataset.load_trajectory(cfg["est"])
    gt = dataset.load_trajectory(cfg["gt"])
    report = metrics.rpe(est, gt, delta=cfg["delta"],
                         max_diff=cfg["max_diff"], delta_time=cfg["delta_time"])
    report.config = _echo_config("rpe", cfg)
    _write(report, cfg)
    return 0


_SMD_DEFAULTS = dict(points=None, ref=None, out=None, format="csv")


def cmd_smd(args):
    cfg = _resolve(args, _SMD_DEFAULTS)
    _require(cfg, "points", "ref")
    mean, median = metrics.smd(_read_points(cfg["points"]), _read_points(cfg["ref"]))
    report = dataset.TableReport(["mean", "median"], [[mean, median]],
                                 _echo_config("smd", cfg))
    _write(report, cfg)
    return 0


_LOOP_DEFAULTS = dict(sequence=None, trajectory=None, candidates=None,
                      covisibility=None, out=None, pr=None,
                      frame_stride=1, threads=1,
                      voxel_size=0.01, normal_window=1, pixel_stride=1,
                      min_splat_px=1.0, backface_culling=True,
                      max_diff=0.02, depth_scale=5000.0, format="csv")


def cmd_loop_rank(args):
    cfg = _resolve(args, _LOOP_DEFAULTS)
    _require(cfg, "sequence", "trajectory", "candidates")
    frames, _ = _load_frames(cfg)
    candidates = loop_eval.load_candidates(cfg["candidates"])
    if cfg["covisibility"] is not None:
        pairs = loop_eval.load_covisibility(cfg["covisibility"])
        candidates = loop_eval.filter_covisible(candidates, pairs)
    if not candidates:
        raise ValueError("no loop candidates left to rank")
    ranked = loop_eval.rank_loops(candidates, frames,
                                  _fusion_config(cfg), _render_config(cfg),
                                  frame_stride=cfg["frame_stride"],
                                  threads=cfg["threads"])
    echo = _echo_config("loop-rank", cfg)
    report = loop_eval.ranked_report(ranked, echo)
    _write(report, cfg)
    if cfg["pr"] is not None:
        points = loop_eval.pr_curve(ranked)
        dataset.write_report(loop_eval.pr_report(points, echo), "csv", cfg["pr"])
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def _add(parser, *names, **kwargs):
    kwargs.setdefault("default", None)
    parser.add_argument(*names, **kwargs)


def _io_opts(p):
    _add(p, "--out", help="output file ('-' for stdout)")
    _add(p, "--format", choices=("csv", "json"), help="report format")


def _frame_opts(p):
    _add(p, "--max-diff", type=float, help="association window in seconds")
    _add(p, "--depth-scale", type=float, help="PNG units per meter")


def _fusion_opts(p):
    _add(p, "--voxel-size", type=float, help="fusion voxel size in meters")
    _add(p, "--normal-window", type=int, help="normal estimation window in pixels")
    _add(p, "--pixel-stride", type=int, help="pixel subsampling stride")


def _render_opts(p):
    _add(p, "--min-splat-px", type=float, help="minimum splat radius in pixels")
    _add(p, "--no-backface-culling", dest="backface_culling",
         action="store_false", help="disable backface culling")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mapeval",
        description="Evaluate dense 3D reconstructions without ground truth, "
                    "benchmark against trajectory metrics, and rank loop closures.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="materialize a synthetic dataset")
    _add(p, "out_dir", nargs="?", help="output directory")
    _add(p, "--descriptor", help="fixture descriptor file (default: built-in)")
    _add(p, "--n-perturbed", type=int, help="number of perturbed trajectories")
    _add(p, "--trans-std", type=float, help="translation noise std in meters")
    _add(p, "--rot-std", type=float, help="rotation noise std in radians")
    _add(p, "--seed", type=int)
    _add(p, "--depth-scale", type=float)
    _add(p, "--config", help="JSON config file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fuse", help="fuse a sequence into a surfel map")
    _add(p, "--sequence", help="sequence directory")
    _add(p, "--trajectory", help="trajectory file for the frames")
    _add(p, "--out", help="output map file")
    _fusion_opts(p)
    _frame_opts(p)
    _add(p, "--config")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("render", help="render one depth frame from a map")
    _add(p, "--map", help="surfel map file")
    _add(p, "--trajectory", help="trajectory providing the camera pose")
    _add(p, "--index", type=int, help="pose index in the trajectory")
    _add(p, "--intrinsics", help="intrinsics JSON file")
    _add(p, "--out", help="output 16-bit PNG")
    _add(p, "--depth-scale", type=float)
    _render_opts(p)
    _add(p, "--config")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("dmp", help="score a model against observed depth")
    _add(p, "--sequence")
    _add(p, "--trajectory")
    _add(p, "--map", help="score this map instead of fusing one")
    _add(p, "--frame-stride", type=int, help="evaluate every n-th frame")
    _add(p, "--threads", type=int, help="parallel evaluation workers")
    _add(p, "--per-frame-out", help="also write the per-frame CSV here")
    _fusion_opts(p)
    _render_opts(p)
    _frame_opts(p)
    _io_opts(p)
    _add(p, "--config")
    p.set_defaults(func=cmd_dmp)

    p = sub.add_parser("ate", help="absolute trajectory error")
    _add(p, "--est", help="estimated trajectory")
    _add(p, "--gt", help="ground-truth trajectory")
    _add(p, "--max-diff", type=float)
    _io_opts(p)
    _add(p, "--config")
    p.set_defaults(func=cmd_ate)

    p = sub.add_parser("rpe", help="relative pose error")
    _add(p, "--est")
    _add(p, "--gt")
    _add(p, "--delta", type=int, help="frame gap")
    _add(p, "--delta-time", type=float, help="time gap in seconds")
    _add(p, "--max-diff", type=float)
    _io_opts(p)
    _add(p, "--config")
    p.set_defaults(func=cmd_rpe)

    p = sub.add_parser("smd", help="surface mean distance between point sets")
    _add(p, "--points", help="reconstructed points (map or xyz text)")
    _add(p, "--ref", help="reference points (map or xyz text)")
    _io_opts(p)
    _add(p, "--config")
    p.set_defaults(func=cmd_smd)

    p = sub.add_parser("loop-rank", help="rank loop candidates by map score")
    _add(p, "--sequence")
    _add(p, "--trajectory")
    _add(p, "--candidates", help="loop candidate file")
    _add(p, "--covisibility", help="co-visible frame pairs to exclude")
    _add(p, "--pr", help="write a precision-recall CSV here (needs labels)")
    _add(p, "--frame-stride", type=int)
    _add(p, "--threads", type=int)
    _fusion_opts(p)
    _render_opts(p)
    _frame_opts(p)
    _io_opts(p)
    _add(p, "--config")
    p.set_defaults(func=cmd_loop_rank)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as e:  # noqa: BLE001 - single exit point for diagnostics
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
