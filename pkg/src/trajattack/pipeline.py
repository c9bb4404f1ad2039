"""Scene -> attack -> evaluation composition shared by the CLI and tests."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attack import (
    AttackConfig,
    LossTrace,
    Perturbation,
    pgd_attack,
    pgd_poly_attack,
    random_attack,
)
from .geometry import InterpolatedTrack, Pose, interpolate_track
from .io_files import RunConfig
from .metrics import EvalConfig, EvalReport, count_points_in_boxes, evaluate_detections, performance_drop
from .scene import Scene, generate_scene, generate_trajectory, raycast_sweep
from .surrogate import Box3D, Detection, DetectorConfig, detect
from .sweep import Sweep, compensate


def study_config(**overrides) -> RunConfig:
    """The calibrated synthetic study setup used by the evaluation harness.

    A 24-beam sensor at 0.4 deg azimuth resolution over seven vehicles in
    an 8-52 m annulus; the detector's ray-density model and count profile
    are matched to that sensor. Keyword overrides replace top-level
    RunConfig fields.
    """
    from .scene import SceneParams, SensorModel, TrajectoryParams
    from .surrogate import DetectorConfig

    sensor = SensorModel(beams=24, elevation_min=-14.0, elevation_max=2.0,
                         azimuth_resolution=0.4)
    cfg = RunConfig(
        sensor=sensor,
        scene=SceneParams(n_vehicles=7, r_min=8.0, r_max=52.0),
        detector=DetectorConfig(rays_per_deg_az=2.5, rays_per_deg_el=1.5,
                                beam_elevations=sensor.elevations,
                                count_profile=0.49),
    )
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


@dataclass
class SimulatedScene:
    """One simulated sample: world, keyframes, track, distorted sweep,
    frame-A labels, and the clean compensated view."""

    scene: Scene
    pose_a: Pose
    pose_b: Pose
    track: InterpolatedTrack
    distorted: Sweep
    labels: List[Box3D]
    clean: Sweep
    clean_counts: np.ndarray


def simulate_scene(cfg: RunConfig, seed: int) -> SimulatedScene:
    """Deterministic per seed: scene and trajectory seeds derive from it."""
    scene = generate_scene(seed, cfg.scene)
    pose_a, pose_b = generate_trajectory(seed + 1, cfg.trajectory)
    track = interpolate_track(pose_a, pose_b, cfg.interpolation_steps)
    distorted, labels = raycast_sweep(scene, track, cfg.sensor,
                                      ground_returns=cfg.scene.ground_returns)
    clean = compensate(distorted, track)
    counts = count_points_in_boxes(clean.point_values(), labels)
    return SimulatedScene(scene, pose_a, pose_b, track, distorted, labels, clean, counts)


def evaluate_sweep(sim: SimulatedScene, sweep: Sweep, det_cfg: DetectorConfig,
                   eval_cfg: EvalConfig,
                   regularizer_stats: Optional[Dict[str, float]] = None
                   ) -> Tuple[List[Detection], EvalReport]:
    dets = detect(sweep, det_cfg)
    report = evaluate_detections(dets, sim.labels, eval_cfg, sim.clean_counts,
                                 regularizer_stats)
    return dets, report


def run_attack(sim: SimulatedScene, atk_cfg: AttackConfig, det_cfg: DetectorConfig
               ) -> Tuple[Perturbation, LossTrace]:
    """Dispatch on the attack mode; random modes consume the config seed."""
    if atk_cfg.mode == "polynomial":
        return pgd_poly_attack(sim.distorted, sim.track, sim.labels, atk_cfg, det_cfg)
    return pgd_attack(sim.distorted, sim.track, sim.labels, atk_cfg, det_cfg)


def random_baseline(sim: SimulatedScene, mode: str, atk_cfg: AttackConfig) -> Perturbation:
    return random_attack(mode, n_steps=sim.track.n_steps, sigma_t=atk_cfg.eps_t,
                         sigma_R=atk_cfg.eps_R, seed=atk_cfg.seed,
                         eps_t=atk_cfg.eps_t, eps_R=atk_cfg.eps_R)


def attacked_view(sim: SimulatedScene, delta: Optional[Perturbation]) -> Sweep:
    """Compensated sweep under a (possibly absent) perturbation."""
    return compensate(sim.distorted, sim.track, delta)


@dataclass
class ScenarioResult:
    """Per-scene outcome of one attack scenario."""

    perturbation: Optional[Perturbation]
    trace: Optional[LossTrace]
    detections: List[Detection]
    report: EvalReport


def run_scenario(sim: SimulatedScene, scenario: str, atk_cfg: AttackConfig,
                 det_cfg: DetectorConfig, eval_cfg: EvalConfig,
                 clean_report: Optional[EvalReport] = None) -> ScenarioResult:
    """Named scenarios: clean, random-translation / random-rotation /
    random-full, and the PGD modes (translation, rotation, full,
    polynomial). A precomputed clean report avoids re-detecting the clean
    sweep for the drop table."""
    delta: Optional[Perturbation] = None
    trace: Optional[LossTrace] = None
    if scenario == "clean":
        pass
    elif scenario.startswith("random-"):
        delta = random_baseline(sim, scenario.split("-", 1)[1], atk_cfg)
    else:
        delta, trace = run_attack(sim, replace(atk_cfg, mode=scenario), det_cfg)
    sweep = attacked_view(sim, delta)
    dets, report = evaluate_sweep(sim, sweep, det_cfg, eval_cfg)
    if scenario != "clean":
        if clean_report is None:
            _, clean_report = evaluate_sweep(sim, sim.clean, det_cfg, eval_cfg)
        report.drop = performance_drop(clean_report, report)
    return ScenarioResult(delta, trace, dets, report)


def mean_ap(reports: Sequence[EvalReport], tag: str = "all") -> float:
    return float(np.mean([r.ap_by_bin[tag] for r in reports]))


def parameter_sweep(cfg: RunConfig, steps_list: Sequence[int],
                    iters_list: Optional[Sequence[int]] = None,
                    alpha_list: Optional[Sequence[float]] = None,
                    scenario: Optional[str] = None) -> List[dict]:
    """Grid harness over interpolation steps, iteration counts, and step
    sizes; one summary row (mean clean/attacked AP over the configured
    scene count) per grid cell."""
    scenario = scenario or cfg.attack.mode
    iters_list = list(iters_list) if iters_list else [cfg.attack.iters]
    alpha_list = list(alpha_list) if alpha_list else [cfg.attack.alpha_t]
    rows: List[dict] = []
    for steps in steps_list:
        for iters in iters_list:
            for alpha in alpha_list:
                cell_cfg = replace(cfg, interpolation_steps=int(steps))
                # keep the translation/rotation step-size ratio of the base config
                scale = alpha / cfg.attack.alpha_t if cfg.attack.alpha_t else 1.0
                atk = replace(cell_cfg.attack, iters=int(iters), alpha_t=float(alpha),
                              alpha_R=float(cell_cfg.attack.alpha_R * scale))
                clean_aps, attacked_aps = [], []
                for k in range(cfg.n_scenes):
                    sim = simulate_scene(cell_cfg, cfg.seed + 1000 * k)
                    _, clean_report = evaluate_sweep(sim, sim.clean, cell_cfg.detector,
                                                     cell_cfg.evaluation)
                    result = run_scenario(sim, scenario, atk, cell_cfg.detector,
                                          cell_cfg.evaluation)
                    clean_aps.append(clean_report.ap_by_bin["all"])
                    attacked_aps.append(result.report.ap_by_bin["all"])
                rows.append({
                    "interpolation_steps": int(steps),
                    "iters": int(iters),
                    "alpha_t": float(alpha),
                    "mean_clean_ap": float(np.mean(clean_aps)),
                    "mean_attacked_ap": float(np.mean(attacked_aps)),
                })
    return rows
