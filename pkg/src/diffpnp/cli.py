"""Command-line interface: experiment drivers and the gradient-check gate.

Four subcommands: `pose`, `sfm`, `calib` run the end-to-end tasks and write
plot-ready CSV traces plus JSON summaries; `gradcheck` compares the
implicit solver Jacobians against the central-difference oracle and exits
nonzero when they disagree beyond tolerance.

Config precedence is defaults < config file < command-line flags. Every run
writes a manifest (resolved config, seed, version, timestamps, output
paths); re-running with a manifest as --config reproduces the trace files
byte for byte on the same build.

Exit codes: 0 success, 1 numerical failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DiffPnPError
from .geometry import Correspondences, Intrinsics, project
from .implicit import (
    fd_jacobian_oracle,
    max_relative_error,
    solution_jacobians,
)
from .solver import solve_pnp
from .tasks import (
    SceneSpec,
    TrainConfig,
    aligned_structure_rmse,
    calibration_provider,
    generate_synthetic,
    keypoint_provider,
    mlp_keypoint_provider,
    rotation_error_deg,
    run_calibration,
    run_pose_estimation,
    run_sfm,
    sfm_problem_from_scene,
    structure_provider,
    translation_error,
)

DEFAULTS = {
    "pose": {
        "n": 8,
        "lambda": 1.0,
        "alpha": 0.1,
        "epochs": 2000,
        "seed": 0,
        "noise": 0.0,
        "provider": "direct",
        "target_loss": 1e-6,
    },
    "sfm": {
        "n": 100,
        "frames": 12,
        "visibility": 0.5,
        "noise": 0.0,
        "alpha": 3e-5,
        "epochs": 5000,
        "seed": 0,
        "snapshot_stride": 0,
        "scene": None,
        "target_loss": 1e-7,
    },
    "calib": {
        "n": 8,
        "alpha": 0.05,
        "epochs": 20000,
        "seed": 0,
        "noise": 0.0,
        "correspondences": None,
        "truth": [800.0, 700.0, 400.0, 300.0],
        "target_loss": 1e-8,
    },
    "gradcheck": {
        "n": 8,
        "noise": 0.0,
        "seed": 1,
        "repeat": 1,
        "tolerance": 1e-3,
        "step": 1e-5,
    },
}

# Scene geometry shipped with the sfm task (chosen for reliable convergence
# of plain gradient descent; see README).
SFM_SCENE_KWARGS = {
    "rot_range": (0.1, 2.2),
    "depth_range": (2.0, 4.0),
    "lateral_frac": 0.15,
}


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_trace(path) -> dict:
    """Read a trace CSV back as {column: float array}."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = [[] for _ in header]
        for row in reader:
            for c, v in zip(cols, row):
                c.append(float(v))
    return {name: np.asarray(col) for name, col in zip(header, cols)}


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _load_config_file(path: str) -> dict:
    data = read_json(path)
    if isinstance(data, dict) and "command" in data and "config" in data:
        return data["config"]  # a manifest: reuse its resolved config
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    return data


def _resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config:
        file_cfg = _load_config_file(args.config)
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise ValueError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in cfg:
        flag = {"lambda": "lambda_"}.get(key, key)
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _manifest(command: str, cfg: dict, out_dir: Path, outputs) -> None:
    manifest = {
        "command": command,
        "config": cfg,
        "seed": cfg.get("seed"),
        "artifact_version": __version__,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "outputs": [str(p) for p in outputs],
    }
    _write_json(out_dir / "manifest.json", manifest)


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_pose(args) -> int:
    cfg = _resolve_config("pose", args)
    if cfg["lambda"] < 0:
        print("error: lambda must be >= 0", file=sys.stderr)
        return 2
    if cfg["n"] < 4:
        print("error: n must be >= 4", file=sys.stderr)
        return 2
    out = _prepare_out(args)

    scene = generate_synthetic(
        SceneSpec(n=cfg["n"], frames=1, noise_sigma=cfg["noise"], seed=cfg["seed"])
    )
    if cfg["provider"] == "direct":
        provider = keypoint_provider(scene, cfg["seed"])
    elif cfg["provider"] == "mlp":
        provider = mlp_keypoint_provider(scene, cfg["seed"])
    else:
        print(f"error: unknown provider {cfg['provider']!r}", file=sys.stderr)
        return 2
    train = TrainConfig(
        step_size=cfg["alpha"],
        lambda_reg=cfg["lambda"],
        max_epochs=cfg["epochs"],
        target_loss=cfg["target_loss"],
        seed=cfg["seed"],
    )
    trace = run_pose_estimation(
        provider, scene.poses[0], scene.pts3d, scene.intrinsics, train
    )

    target_pi = scene.clean_projection(0)
    rows = []
    for rec in trace.records:
        reproj = project(scene.pts3d, _pose_of(rec.pose), scene.intrinsics)
        reproj_rms = _rms_px(reproj - target_pi)
        rows.append([rec.epoch, rec.loss, *rec.pose.tolist(), reproj_rms])
    header = ["epoch", "loss", "rot_x", "rot_y", "rot_z", "t_x", "t_y", "t_z", "reproj_rms"]
    trace_path = out / "trace.csv"
    _write_csv(trace_path, header, rows)

    summary_path = out / "summary.json"
    summary: dict = {"converged": trace.converged, "failure": trace.failure}
    if trace.records:
        final_reproj = project(scene.pts3d, trace.final_pose, scene.intrinsics)
        pose_reproj_rms = _rms_px(final_reproj - target_pi)
        keypoint_rms = _rms_px(trace.final_x2d - target_pi)
        summary.update(
            {
                "epochs": len(trace.records),
                "final_loss": trace.final_loss,
                "rotation_error_deg": rotation_error_deg(trace.final_pose, scene.poses[0]),
                "translation_error": translation_error(trace.final_pose, scene.poses[0]),
                "pose_reproj_rms_px": pose_reproj_rms,
                "keypoint_rms_px": keypoint_rms,
                "keypoint_drift": bool(keypoint_rms > 5.0 and pose_reproj_rms <= 0.5),
            }
        )
    _write_json(summary_path, summary)
    _manifest("pose", cfg, out, [trace_path, summary_path])
    if trace.failure:
        print(f"pose: failed: {trace.failure}", file=sys.stderr)
        return 1
    print(f"pose: final_loss={summary['final_loss']:.3e} keypoint_rms={summary['keypoint_rms_px']:.3f}px")
    return 0


def _pose_of(vec):
    from .geometry import Pose

    return Pose.from_vector(vec)


def _rms_px(flat_residual: np.ndarray) -> float:
    d = flat_residual.reshape(-1, 2)
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def _load_scene_points(path: str) -> np.ndarray:
    data = read_json(path)
    pts = np.asarray(data["points"], dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"scene file {path} must hold an (n, 3) 'points' array")
    return pts


def cmd_sfm(args) -> int:
    cfg = _resolve_config("sfm", args)
    if not (0.0 < cfg["visibility"] <= 1.0):
        print("error: visibility must be in (0, 1]", file=sys.stderr)
        return 2
    points = None
    if cfg["scene"]:
        if not Path(cfg["scene"]).exists():
            print(f"error: scene file not found: {cfg['scene']}", file=sys.stderr)
            return 2
        points = _load_scene_points(cfg["scene"])
    out = _prepare_out(args)

    n = points.shape[0] if points is not None else cfg["n"]
    spec = SceneSpec(
        n=n,
        frames=cfg["frames"],
        visibility=cfg["visibility"],
        noise_sigma=cfg["noise"],
        seed=cfg["seed"],
        **SFM_SCENE_KWARGS,
    )
    scene = generate_synthetic(spec, points=points)
    problem = sfm_problem_from_scene(scene)
    provider = structure_provider(n, cfg["seed"], std=0.5 * scene.diameter)
    train = TrainConfig(
        step_size=cfg["alpha"] * scene.diameter**2,
        max_epochs=cfg["epochs"],
        target_loss=cfg["target_loss"],
        seed=cfg["seed"],
    )
    trace = run_sfm(
        provider, problem, train, snapshot_stride=int(cfg["snapshot_stride"])
    )

    trace_path = out / "trace.csv"
    _write_csv(trace_path, ["epoch", "loss"], list(enumerate(trace.losses)))
    outputs = [trace_path]
    for epoch, structure in trace.snapshots:
        snap_path = out / f"structure_epoch_{epoch:05d}.json"
        _write_json(snap_path, {"epoch": epoch, "points": structure.tolist()})
        outputs.append(snap_path)

    summary: dict = {"converged": trace.converged, "failure": trace.failure}
    if trace.final_structure is not None:
        final_path = out / "structure_final.json"
        _write_json(final_path, {"points": trace.final_structure.tolist()})
        outputs.append(final_path)
        under = np.flatnonzero(problem.visibility_counts < 2)
        summary.update(
            {
                "epochs": len(trace.losses),
                "final_loss": trace.losses[-1] if trace.losses else None,
                "aligned_rmse_frac_diameter": aligned_structure_rmse(
                    trace.final_structure, scene.pts3d, exclude=under
                ),
                "excluded_points": under.tolist(),
            }
        )
    summary_path = out / "summary.json"
    _write_json(summary_path, summary)
    outputs.append(summary_path)
    _manifest("sfm", cfg, out, outputs)
    if trace.failure:
        print(f"sfm: failed: {trace.failure}", file=sys.stderr)
        return 1
    print(
        f"sfm: final_loss={summary['final_loss']:.3e} "
        f"aligned_rmse={summary['aligned_rmse_frac_diameter']:.5f} of diameter"
    )
    return 0


def _load_correspondences(path: str):
    data = read_json(path)
    x2d = np.asarray(data["x2d"], dtype=np.float64)
    z3d = np.asarray(data["z3d"], dtype=np.float64)
    corrs = Correspondences(x2d, z3d)
    truth = None
    if "K" in data:
        k = data["K"]
        truth = [float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"])]
    return corrs, truth


def cmd_calib(args) -> int:
    cfg = _resolve_config("calib", args)
    out = _prepare_out(args)

    if cfg["correspondences"]:
        if not Path(cfg["correspondences"]).exists():
            print(
                f"error: correspondences file not found: {cfg['correspondences']}",
                file=sys.stderr,
            )
            return 2
        corrs, truth = _load_correspondences(cfg["correspondences"])
    else:
        scene = generate_synthetic(
            SceneSpec(n=cfg["n"], frames=1, noise_sigma=cfg["noise"], seed=cfg["seed"])
        )
        corrs = scene.correspondences(0)
        truth = list(scene.intrinsics.params)
    if cfg["truth"] is not None and cfg["correspondences"]:
        truth = [float(v) for v in cfg["truth"]]

    if truth is not None and any(not (0.0 < v < 1000.0) for v in truth):
        print(
            "warning: ground-truth intrinsics outside (0, 1000): the bounded "
            "provider cannot reach them",
            file=sys.stderr,
        )

    provider = calibration_provider(cfg["seed"])
    train = TrainConfig(
        step_size=cfg["alpha"],
        max_epochs=cfg["epochs"],
        target_loss=cfg["target_loss"],
        seed=cfg["seed"],
    )
    trace = run_calibration(provider, corrs, train)

    trace_path = out / "trace.csv"
    _write_csv(
        trace_path,
        ["epoch", "loss", "fx", "fy", "cx", "cy"],
        [[r.epoch, r.loss, *r.params.tolist()] for r in trace.records],
    )
    summary: dict = {"converged": trace.converged, "failure": trace.failure}
    if trace.records:
        summary.update(
            {
                "epochs": len(trace.records),
                "final_loss": trace.final_loss,
                "intrinsics": dict(
                    zip(("fx", "fy", "cx", "cy"), trace.final_params.tolist())
                ),
            }
        )
        if truth is not None:
            rel = np.abs(trace.final_params - np.asarray(truth)) / np.asarray(truth)
            summary["relative_errors"] = dict(zip(("fx", "fy", "cx", "cy"), rel.tolist()))
    summary_path = out / "summary.json"
    _write_json(summary_path, summary)
    _manifest("calib", cfg, out, [trace_path, summary_path])
    if trace.failure:
        print(f"calib: failed: {trace.failure}", file=sys.stderr)
        return 1
    line = f"calib: final_loss={summary['final_loss']:.3e}"
    if "relative_errors" in summary:
        worst = max(summary["relative_errors"].values())
        line += f" worst_rel_error={worst:.4f}"
    print(line)
    return 0


def run_gradcheck(cfg: dict) -> dict:
    """Compare implicit and central-difference Jacobians on seeded instances.

    Returns the report dict; `report["passed"]` is the gate. Also used
    directly by the acceptance suite.
    """
    instances = []
    worst = 0.0
    failures = []
    for k in range(int(cfg["repeat"])):
        seed = int(cfg["seed"]) + k
        scene = generate_synthetic(
            SceneSpec(n=int(cfg["n"]), frames=1, noise_sigma=float(cfg["noise"]), seed=seed)
        )
        corrs = scene.correspondences(0)
        record: dict = {"seed": seed, "n": int(cfg["n"]), "noise": float(cfg["noise"])}
        try:
            sol = solve_pnp(corrs, scene.intrinsics)
            if not sol.converged:
                raise DiffPnPError(
                    f"forward solve did not converge (stationarity {sol.stationarity_norm:.3e})"
                )
            t0 = time.perf_counter()
            jacs = solution_jacobians(corrs, scene.intrinsics, sol)
            implicit_time = time.perf_counter() - t0
            record["conditioning"] = jacs.conditioning
            record["implicit_wall_time_s"] = implicit_time
            record["inputs"] = {}
            fd_total = 0.0
            for name, implicit_jac in (
                ("x2d", jacs.dg_dx),
                ("pts3d", jacs.dg_dz),
                ("intrinsics", jacs.dg_dK),
            ):
                t0 = time.perf_counter()
                fd = fd_jacobian_oracle(
                    corrs, scene.intrinsics, sol, name, step=float(cfg["step"])
                )
                fd_time = time.perf_counter() - t0
                fd_total += fd_time
                scale = max(float(np.abs(fd.jacobian).max()), 1e-300)
                elementwise = np.abs(implicit_jac - fd.jacobian) / scale
                err = float(elementwise.max())
                worst = max(worst, err)
                record["inputs"][name] = {
                    "max_rel_error": err,
                    "median_rel_error": float(np.median(elementwise)),
                    "fd_solver_calls": fd.solver_calls,
                    "expected_solver_calls": 2 * implicit_jac.shape[1],
                    "fd_wall_time_s": fd_time,
                }
            record["fd_wall_time_total_s"] = fd_total
            record["fd_to_implicit_speed_ratio"] = fd_total / max(implicit_time, 1e-12)
        except DiffPnPError as e:
            record["error"] = f"{type(e).__name__}: {e}"
            failures.append(record["error"])
        instances.append(record)

    tolerance = float(cfg["tolerance"])
    report = {
        "config": dict(cfg),
        "instances": instances,
        "max_rel_error": worst,
        "tolerance": tolerance,
        "errors": failures,
        "passed": not failures and worst <= tolerance,
    }
    return report


def cmd_gradcheck(args) -> int:
    cfg = _resolve_config("gradcheck", args)
    if cfg["tolerance"] <= 0:
        print("error: tolerance must be positive", file=sys.stderr)
        return 2
    out = _prepare_out(args)
    report = run_gradcheck(cfg)
    report_path = out / "gradcheck.json"
    _write_json(report_path, report)
    _manifest("gradcheck", cfg, out, [report_path])
    status = "PASS" if report["passed"] else "FAIL"
    print(
        f"gradcheck: {status} max_rel_error={report['max_rel_error']:.3e} "
        f"(tolerance {report['tolerance']:.1e}, {len(report['instances'])} instance(s))"
    )
    for err in report["errors"]:
        print(f"gradcheck: {err}", file=sys.stderr)
    return 0 if report["passed"] else 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffpnp",
        description="Differentiable PnP experiments and gradient checks.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (or a manifest to replay)")
        p.add_argument("--seed", type=int, help="run seed")
        p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("pose", help="learn 2D keypoints matching a target pose")
    common(p)
    p.add_argument("--lambda", dest="lambda_", type=float, help="keypoint anchor weight")
    p.add_argument("--alpha", type=float, help="gradient step size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--n", type=int, help="number of landmarks")
    p.add_argument("--noise", type=float, help="observation noise sigma (px)")
    p.add_argument("--provider", choices=("direct", "mlp"))
    p.set_defaults(func=cmd_pose)

    p = sub.add_parser("sfm", help="recover 3D structure from multi-frame tracks")
    common(p)
    p.add_argument("--alpha", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--n", type=int, help="number of 3D points")
    p.add_argument("--frames", type=int)
    p.add_argument("--visibility", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--snapshot-stride", dest="snapshot_stride", type=int)
    p.add_argument("--scene", help="JSON file with {'points': [[x,y,z],...]}")
    p.set_defaults(func=cmd_sfm)

    p = sub.add_parser("calib", help="learn pinhole intrinsics from correspondences")
    common(p)
    p.add_argument("--alpha", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument(
        "--correspondences", help="JSON file with x2d, z3d and optional true K"
    )
    p.set_defaults(func=cmd_calib)

    p = sub.add_parser("gradcheck", help="verify implicit gradients against FD")
    common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--repeat", type=int, help="number of seeded instances")
    p.add_argument("--tolerance", type=float)
    p.add_argument("--step", type=float, help="FD step size")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("BPNP_THREADS")
    if threads is not None:
        try:
            if int(threads) < 1:
                raise ValueError
        except ValueError:
            print(f"error: BPNP_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
            return 2
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DiffPnPError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
