"""Command-line toolkit tying the pipeline together.

Subcommands: simulate, distort, compensate, attack, eval, sweep-params,
plot. Exit codes: 0 success, 1 usage, 2 I/O or file-format failure,
3 numeric failure. Identical invocations with identical config and seed
produce identical output files (no timestamps are emitted).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from typing import List, Optional, Sequence

import numpy as np

from . import io_files as iof
from .attack import AttackConfig, Perturbation
from .autodiff import NumericError
from .geometry import interpolate_track
from .io_files import FileFormatError, RunConfig
from .metrics import performance_drop
from .pipeline import (
    SimulatedScene,
    evaluate_sweep,
    parameter_sweep,
    run_scenario,
    simulate_scene,
)
from .sweep import REF_CAPTURE, REF_KEYFRAME, compensate, distort


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="trajattack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="run configuration file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory or file")

    p_sim = sub.add_parser("simulate", help="generate scene, trajectory, distorted sweep")
    add_common(p_sim)

    p_dis = sub.add_parser("distort", help="apply motion distortion to a keyframe sweep")
    p_dis.add_argument("--points", required=True)
    p_dis.add_argument("--poses", required=True)
    p_dis.add_argument("--steps", type=int, default=100)
    p_dis.add_argument("--out", required=True)

    p_comp = sub.add_parser("compensate", help="motion-compensate a distorted sweep")
    p_comp.add_argument("--points", required=True)
    p_comp.add_argument("--poses", required=True)
    p_comp.add_argument("--steps", type=int, default=100)
    p_comp.add_argument("--perturbation")
    p_comp.add_argument("--out", required=True)

    p_atk = sub.add_parser("attack", help="run a PGD trajectory attack")
    add_common(p_atk)
    p_atk.add_argument("--in", dest="in_dir", help="simulate output dir (else simulated inline)")
    p_atk.add_argument("--mode", choices=("translation", "rotation", "full", "polynomial"))
    p_atk.add_argument("--branch", choices=("classification", "regression"))
    p_atk.add_argument("--iters", type=int)
    p_atk.add_argument("--eps-t", type=float)
    p_atk.add_argument("--eps-r", type=float)
    p_atk.add_argument("--alpha-t", type=float)
    p_atk.add_argument("--alpha-r", type=float)
    p_atk.add_argument("--steps", type=int, help="interpolation step count N")
    p_atk.add_argument("--regularizer", choices=("none", "smoothness", "lp", "chamfer"))
    p_atk.add_argument("--lambda-s", type=float)
    p_atk.add_argument("--lambda-d", type=float)

    p_eval = sub.add_parser("eval", help="evaluate clean vs attacked detections")
    add_common(p_eval)
    p_eval.add_argument("--in", dest="in_dir")
    p_eval.add_argument("--perturbation")
    p_eval.add_argument("--steps", type=int)

    p_sweep = sub.add_parser("sweep-params", help="grid over steps / iterations / step sizes")
    add_common(p_sweep)
    p_sweep.add_argument("--steps", required=True, help="comma list of interpolation steps")
    p_sweep.add_argument("--iters", help="comma list of iteration counts")
    p_sweep.add_argument("--alpha-t", help="comma list of translation step sizes")
    p_sweep.add_argument("--scenes", type=int, help="scenes per grid cell")

    p_plot = sub.add_parser("plot", help="emit SVG/CSV views of traces, PR curves, points")
    p_plot.add_argument("--trace", help="loss trace CSV from attack")
    p_plot.add_argument("--report", help="report JSON from eval")
    p_plot.add_argument("--before", help="point file (clean)")
    p_plot.add_argument("--after", help="point file (perturbed)")
    p_plot.add_argument("--out", required=True)
    return parser


def _load_config(args) -> RunConfig:
    cfg = iof.read_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _apply_attack_overrides(cfg: RunConfig, args) -> RunConfig:
    updates = {}
    for flag, field in (("mode", "mode"), ("branch", "branch"), ("iters", "iters"),
                        ("eps_t", "eps_t"), ("eps_r", "eps_R"), ("alpha_t", "alpha_t"),
                        ("alpha_r", "alpha_R"), ("regularizer", "regularizer"),
                        ("lambda_s", "lambda_s"), ("lambda_d", "lambda_d")):
        value = getattr(args, flag, None)
        if value is not None:
            updates[field] = value
    attack = dataclasses.replace(cfg.attack, **updates) if updates else cfg.attack
    if getattr(args, "steps", None):
        cfg = dataclasses.replace(cfg, interpolation_steps=args.steps)
    return dataclasses.replace(cfg, attack=attack)


def _write_simulation(sim: SimulatedScene, cfg: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    iof.write_config(cfg, os.path.join(out_dir, "config.txt"))
    iof.write_poses([sim.pose_a, sim.pose_b], os.path.join(out_dir, "poses.txt"))
    iof.write_points(sim.distorted, os.path.join(out_dir, "sweep.bin"))
    iof.write_labels(sim.labels, os.path.join(out_dir, "labels.json"))


def _load_or_simulate(cfg: RunConfig, in_dir: Optional[str]) -> SimulatedScene:
    if in_dir is None:
        return simulate_scene(cfg, cfg.seed)
    poses = iof.read_poses(os.path.join(in_dir, "poses.txt"))
    if len(poses) < 2:
        raise FileFormatError(f"{in_dir}/poses.txt: need two keyframe poses")
    distorted = iof.read_points(os.path.join(in_dir, "sweep.bin"), reference=REF_CAPTURE)
    labels = iof.read_labels(os.path.join(in_dir, "labels.json"))
    track = interpolate_track(poses[0], poses[1], distorted.n_packets)
    clean = compensate(distorted, track)
    from .metrics import count_points_in_boxes

    counts = count_points_in_boxes(clean.point_values(), labels)
    return SimulatedScene(None, poses[0], poses[1], track, distorted, labels, clean, counts)


def _cmd_simulate(args) -> int:
    cfg = _load_config(args)
    sim = simulate_scene(cfg, cfg.seed)
    _write_simulation(sim, cfg, args.out)
    print(f"simulate: wrote scene with {len(sim.labels)} vehicles, "
          f"{sim.distorted.m} points to {args.out}")
    return 0


def _cmd_distort(args) -> int:
    poses = iof.read_poses(args.poses)
    if len(poses) < 2:
        raise FileFormatError(f"{args.poses}: need two keyframe poses")
    sw = iof.read_points(args.points, fallback_steps=args.steps, reference=REF_KEYFRAME)
    track = interpolate_track(poses[0], poses[1], sw.n_packets)
    iof.write_points(distort(sw, track), args.out)
    print(f"distort: wrote {sw.m} points to {args.out}")
    return 0


def _cmd_compensate(args) -> int:
    poses = iof.read_poses(args.poses)
    if len(poses) < 2:
        raise FileFormatError(f"{args.poses}: need two keyframe poses")
    sw = iof.read_points(args.points, fallback_steps=args.steps, reference=REF_CAPTURE)
    track = interpolate_track(poses[0], poses[1], sw.n_packets)
    delta = iof.read_perturbation(args.perturbation) if args.perturbation else None
    iof.write_points(compensate(sw, track, delta), args.out)
    print(f"compensate: wrote {sw.m} points to {args.out}")
    return 0


def _cmd_attack(args) -> int:
    cfg = _apply_attack_overrides(_load_config(args), args)
    sim = _load_or_simulate(cfg, args.in_dir)
    result = run_scenario(sim, cfg.attack.mode, cfg.attack, cfg.detector, cfg.evaluation)
    os.makedirs(args.out, exist_ok=True)
    iof.write_perturbation(result.perturbation, os.path.join(args.out, "perturbation.json"))
    iof.write_trace_csv(result.trace, os.path.join(args.out, "trace.csv"))
    print(f"attack[{cfg.attack.mode}/{cfg.attack.branch}]: objective "
          f"{result.trace.objective[0]:.6g} -> {result.trace.objective[-1]:.6g}, "
          f"AP {result.report.ap_by_bin['all']:.3f}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    if getattr(args, "steps", None):
        cfg = dataclasses.replace(cfg, interpolation_steps=args.steps)
    sim = _load_or_simulate(cfg, args.in_dir)
    delta = iof.read_perturbation(args.perturbation) if args.perturbation else None

    os.makedirs(args.out, exist_ok=True)
    dets_clean, report_clean = evaluate_sweep(sim, sim.clean, cfg.detector, cfg.evaluation)
    iof.write_detections(dets_clean, os.path.join(args.out, "detections_clean.csv"))
    iof.write_report_json(report_clean, os.path.join(args.out, "report_clean.json"))

    attacked = compensate(sim.distorted, sim.track, delta)
    dets_atk, report_atk = evaluate_sweep(sim, attacked, cfg.detector, cfg.evaluation)
    report_atk.drop = performance_drop(report_clean, report_atk)
    iof.write_detections(dets_atk, os.path.join(args.out, "detections_attacked.csv"))
    iof.write_report_json(report_atk, os.path.join(args.out, "report_attacked.json"))
    iof.write_report_csv(report_atk, os.path.join(args.out, "report.csv"))
    print(f"eval: clean AP {report_clean.ap_by_bin['all']:.3f}, "
          f"attacked AP {report_atk.ap_by_bin['all']:.3f}")
    return 0


def _parse_list(text: Optional[str], cast) -> Optional[List]:
    if not text:
        return None
    return [cast(part) for part in text.split(",") if part.strip()]


def _cmd_sweep_params(args) -> int:
    cfg = _load_config(args)
    if args.scenes:
        cfg = dataclasses.replace(cfg, n_scenes=args.scenes)
    steps_list = _parse_list(args.steps, int)
    iters_list = _parse_list(args.iters, int)
    alpha_list = _parse_list(args.alpha_t, float)
    rows = parameter_sweep(cfg, steps_list, iters_list, alpha_list)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "sweep_summary.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["interpolation_steps", "iters", "alpha_t",
                         "mean_clean_ap", "mean_attacked_ap"])
        for row in rows:
            writer.writerow([row["interpolation_steps"], row["iters"], repr(row["alpha_t"]),
                             repr(row["mean_clean_ap"]), repr(row["mean_attacked_ap"])])
        for row in rows:
            cell = (f"cell_steps{row['interpolation_steps']}"
                    f"_it{row['iters']}_a{row['alpha_t']:g}.json")
            with open(os.path.join(args.out, cell), "w", encoding="utf-8") as cf:
                json.dump(row, cf, indent=1, sort_keys=True)
                cf.write("\n")
    print(f"sweep-params: wrote {len(rows)} grid cells to {args.out}")
    return 0


def _setup_matplotlib():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "trajattack"
    import matplotlib.pyplot as plt

    return plt


def _save_svg(fig, path: str) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def _cmd_plot(args) -> int:
    plt = _setup_matplotlib()
    os.makedirs(args.out, exist_ok=True)
    wrote = []
    if args.trace:
        iters, objective = [], []
        with open(args.trace, "r", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                iters.append(int(row["iteration"]))
                objective.append(float(row["objective"]))
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(iters, objective, marker="o", ms=3)
        ax.set_xlabel("iteration")
        ax.set_ylabel("objective")
        fig.tight_layout()
        path = os.path.join(args.out, "loss_trace.svg")
        _save_svg(fig, path)
        plt.close(fig)
        wrote.append(path)
    if args.report:
        with open(args.report, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        pr = payload.get("pr_all")
        if pr:
            fig, ax = plt.subplots(figsize=(4.5, 4))
            ax.plot(pr["recall"], pr["precision"], drawstyle="steps-post")
            ax.set_xlabel("recall")
            ax.set_ylabel("precision")
            ax.set_xlim(0, 1.02)
            ax.set_ylim(0, 1.02)
            fig.tight_layout()
            path = os.path.join(args.out, "pr_curve.svg")
            _save_svg(fig, path)
            plt.close(fig)
            wrote.append(path)
            csv_path = os.path.join(args.out, "pr_curve.csv")
            with open(csv_path, "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["recall", "precision"])
                for r, p in zip(pr["recall"], pr["precision"]):
                    writer.writerow([repr(r), repr(p)])
            wrote.append(csv_path)
    if args.before and args.after:
        before = iof.read_points(args.before, fallback_steps=1).point_values()
        after = iof.read_points(args.after, fallback_steps=1).point_values()
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.scatter(before[:, 0], before[:, 1], s=1, c="tab:blue", label="clean")
        ax.scatter(after[:, 0], after[:, 1], s=1, c="tab:red", label="perturbed")
        ax.set_aspect("equal")
        ax.legend(loc="upper right")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        fig.tight_layout()
        path = os.path.join(args.out, "bev_points.svg")
        _save_svg(fig, path)
        plt.close(fig)
        wrote.append(path)
    if not wrote:
        raise UsageError("plot: nothing to do (pass --trace, --report, or --before/--after)")
    print("plot: wrote " + ", ".join(wrote))
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "distort": _cmd_distort,
    "compensate": _cmd_compensate,
    "attack": _cmd_attack,
    "eval": _cmd_eval,
    "sweep-params": _cmd_sweep_params,
    "plot": _cmd_plot,
}


def cli_dispatch(argv: Sequence[str]) -> int:
    """Parse and run one CLI invocation; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(list(argv))
        return _COMMANDS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except FileFormatError as err:
        print(f"file error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 3
    except ValueError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
