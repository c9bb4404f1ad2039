"""Synthetic scenes and a spinning-LiDAR raycaster.

The raycaster emits natively motion-distorted sweeps: packet n is cast from
the n-th interpolated pose over its azimuth sector, so the points land in
capture-frame coordinates, exactly the quantity the compensation pipeline
consumes. Ground-truth boxes come back expressed in keyframe A.

Frames: world z is up with the ground plane at ``ground``; the sensor sits
at the vehicle-frame origin, ``height`` above ground. Raycasting is pure
given (scene, track, sensor) and deterministic per seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import InterpolatedTrack, Pose, quat_from_yaw
from .surrogate import Box3D
from .sweep import Packet, Sweep, REF_CAPTURE


class PlacementError(RuntimeError):
    """Raised when rejection sampling cannot place all vehicles; carries
    the number successfully placed."""

    def __init__(self, requested: int, placed: int, tries: int):
        super().__init__(
            f"placed {placed}/{requested} vehicles after {tries} tries")
        self.requested = requested
        self.placed = placed


@dataclass(frozen=True)
class Scene:
    """Vehicle boxes (world frame; list index is the vehicle identifier),
    ground-plane height, BEV extents, and the generating seed."""

    vehicles: tuple
    ground: float
    extents: tuple
    seed: int


@dataclass(frozen=True)
class SceneParams:
    """Scene-generation knobs; vehicles are sampled in a depth annulus so
    every depth bin of the evaluation gets members."""

    n_vehicles: int = 8
    extents: tuple = (-62.0, 62.0, -62.0, 62.0)
    ground: float = 0.0
    r_min: float = 8.0
    r_max: float = 52.0
    size_mean: tuple = (4.5, 1.9, 1.7)
    size_std: tuple = (0.05, 0.03, 0.03)
    clearance: float = 2.0
    max_tries: int = 400
    ground_returns: bool = True


@dataclass(frozen=True)
class TrajectoryParams:
    speed: float = 10.0
    duration: float = 0.5
    curvature: float = 0.02
    height: float = 1.8


@dataclass(frozen=True)
class SensorModel:
    """Spinning sensor: one ray column per ``azimuth_resolution`` degrees at
    each elevation. ``rays_per_packet`` of None derives the per-packet
    column count from the resolution so physical ray density is independent
    of the interpolation step count."""

    beams: int = 32
    elevation_min: float = -25.0
    elevation_max: float = 5.0
    elevations: Optional[tuple] = None
    max_range: float = 70.0
    rotation_rate: float = 20.0
    azimuth_resolution: float = 0.25
    rays_per_packet: Optional[int] = None

    def __post_init__(self):
        if self.max_range <= 0.0:
            raise ValueError("max_range must be positive")
        if self.elevations is None:
            elev = tuple(float(e) for e in
                         np.linspace(self.elevation_min, self.elevation_max, self.beams))
            object.__setattr__(self, "elevations", elev)
        else:
            object.__setattr__(self, "elevations", tuple(float(e) for e in self.elevations))
        if len(self.elevations) != self.beams:
            raise ValueError("elevations length must equal beam count")
        if np.any(np.diff(self.elevations) <= 0.0):
            raise ValueError("elevations must be strictly increasing")

    def columns_per_packet(self, n_steps: int) -> int:
        if self.rays_per_packet is not None:
            return max(1, self.rays_per_packet)
        width = 360.0 / n_steps
        return max(1, int(round(width / self.azimuth_resolution)))


def _bev_rect_overlap(a: Box3D, b: Box3D, clearance: float) -> bool:
    from .metrics import iou3d

    grown = Box3D(a.center, a.size + np.array([clearance, clearance, 0.0]), a.yaw)
    return iou3d(grown, b) > 0.0


def _bearing_interval(cx: float, cy: float, size, margin: float) -> Tuple[float, float]:
    bearing = math.atan2(cy, cx)
    half = math.atan2(0.5 * math.hypot(size[0], size[1]) + margin, math.hypot(cx, cy))
    return bearing - half, bearing + half


def _intervals_overlap(a: Tuple[float, float], b: Tuple[float, float]) -> bool:
    # circular interval overlap on (-pi, pi]
    span = 2.0 * math.pi
    lo = (b[0] - a[0]) % span
    hi = (b[1] - a[0]) % span
    width_a = a[1] - a[0]
    return lo < width_a or hi < width_a or lo > hi


def generate_scene(seed: int, params: SceneParams = SceneParams()) -> Scene:
    """Rejection-sample non-overlapping car-sized boxes, deterministic per
    seed. Placed vehicles additionally occupy disjoint bearing intervals as
    seen from the origin, so no vehicle fully occludes another. Raises
    PlacementError (with the achieved count) when the bounded retry budget
    runs out."""
    rng = np.random.default_rng(seed)
    xmin, xmax, ymin, ymax = params.extents
    boxes: List[Box3D] = []
    intervals: List[Tuple[float, float]] = []
    tries = 0
    while len(boxes) < params.n_vehicles:
        if tries >= params.max_tries:
            raise PlacementError(params.n_vehicles, len(boxes), tries)
        tries += 1
        r = rng.uniform(params.r_min, params.r_max)
        phi = rng.uniform(0.0, 2.0 * math.pi)
        cx, cy = r * math.cos(phi), r * math.sin(phi)
        if not (xmin <= cx <= xmax and ymin <= cy <= ymax):
            continue
        size = np.maximum(rng.normal(params.size_mean, params.size_std), 0.5)
        yaw = rng.uniform(-math.pi, math.pi)
        interval = _bearing_interval(cx, cy, size, params.clearance / 2.0)
        if any(_intervals_overlap(interval, other) for other in intervals):
            continue
        box = Box3D(np.array([cx, cy, params.ground + size[2] / 2.0]), size, yaw)
        if any(_bev_rect_overlap(box, other, params.clearance) for other in boxes):
            continue
        boxes.append(box)
        intervals.append(interval)
    return Scene(tuple(boxes), params.ground, params.extents, seed)


def trajectory_pose(t: float, params: TrajectoryParams, heading0: float) -> Pose:
    """Pose along a constant-speed planar arc at time t."""
    v, kappa = params.speed, params.curvature
    if abs(kappa) < 1e-12:
        x = v * t * math.cos(heading0)
        y = v * t * math.sin(heading0)
        heading = heading0
    else:
        radius = 1.0 / kappa
        psi = v * t * kappa
        # arc in the path frame, rotated by the initial heading
        xa = radius * math.sin(psi)
        ya = radius * (1.0 - math.cos(psi))
        c, s = math.cos(heading0), math.sin(heading0)
        x = c * xa - s * ya
        y = s * xa + c * ya
        heading = heading0 + psi
    return Pose(np.array([x, y, params.height]), quat_from_yaw(heading), stamp=t)


def generate_trajectory(seed: int, params: TrajectoryParams = TrajectoryParams()) -> Tuple[Pose, Pose]:
    """Two keyframe poses on a constant-speed arc; the initial heading is
    drawn from the seed. Heading change over the arc is
    speed * duration * curvature."""
    if params.duration <= 0.0:
        raise ValueError("duration must be positive")
    heading0 = float(np.random.default_rng(seed).uniform(-math.pi, math.pi))
    pose_a = trajectory_pose(0.0, params, heading0)
    pose_b = trajectory_pose(params.duration, params, heading0)
    return pose_a, pose_b


def _ray_box_hits(origins: np.ndarray, dirs: np.ndarray, box: Box3D,
                  t_near: float, t_far: float) -> np.ndarray:
    """Slab test in the box frame; returns hit distance per ray (inf = miss)."""
    rot = box.rotation()
    o = (origins - box.center) @ rot
    d = dirs @ rot
    half = box.size / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    lo = np.minimum(t1, t2).max(axis=1)
    hi = np.maximum(t1, t2).min(axis=1)
    t = np.where((hi >= np.maximum(lo, t_near)) & (lo <= t_far), np.maximum(lo, t_near), np.inf)
    return t


def raycast_sweep(scene: Scene, track: InterpolatedTrack, sensor: SensorModel,
                  ground_returns: bool = True) -> Tuple[Sweep, List[Box3D]]:
    """Cast one full revolution from the moving sensor.

    Packet n covers azimuth sector [n, n+1) * 360/N at the n-th track pose;
    the nearest hit among the oriented boxes and (when ``ground_returns``)
    the ground plane within max_range wins. Hit points are returned in
    frame n (natively distorted, reference "capture-frames"); labels are
    the scene boxes expressed in frame A. Vehicle hits carry intensity 1,
    ground hits 0.
    """
    n_steps = track.n_steps
    cols = sensor.columns_per_packet(n_steps)
    width = 360.0 / n_steps
    elev = np.radians(np.asarray(sensor.elevations))
    t_near = 0.05

    packets = []
    for n in range(n_steps):
        tf = track[n]
        az = np.radians((np.arange(cols) + 0.5) * (width / cols) + n * width)
        az_grid, el_grid = np.meshgrid(az, elev, indexing="ij")
        dirs_sensor = np.stack(
            [np.cos(el_grid) * np.cos(az_grid),
             np.cos(el_grid) * np.sin(az_grid),
             np.sin(el_grid)], axis=-1).reshape(-1, 3)
        dirs_world = dirs_sensor @ tf.R.T
        origin = tf.t

        best = np.full(dirs_world.shape[0], np.inf)
        hit_vehicle = np.zeros(dirs_world.shape[0], dtype=bool)
        origins = np.broadcast_to(origin, dirs_world.shape)
        for box in scene.vehicles:
            t = _ray_box_hits(origins, dirs_world, box, t_near, sensor.max_range)
            closer = t < best
            best = np.where(closer, t, best)
            hit_vehicle |= closer
        if ground_returns:
            dz = dirs_world[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                t_ground = (scene.ground - origin[2]) / dz
            t_ground = np.where(
                (dz < 0.0) & (t_ground >= t_near) & (t_ground <= sensor.max_range),
                t_ground, np.inf)
            ground_closer = t_ground < best
            best = np.where(ground_closer, t_ground, best)
            hit_vehicle &= ~ground_closer

        hit = np.isfinite(best)
        # frame-n coordinates are just distance times the sensor-frame ray
        pts = dirs_sensor[hit] * best[hit, None]
        intensity = hit_vehicle[hit].astype(float)
        lo = (n * width) % 360.0
        hi = ((n + 1) * width) % 360.0
        packets.append(Packet(pts, n, (lo, hi), intensity))

    sweep = Sweep(packets, REF_CAPTURE)

    t_wa = track[0]
    labels = []
    for box in scene.vehicles:
        center_a = t_wa.R.T @ (box.center - t_wa.t)
        yaw_a = box.yaw - math.atan2(t_wa.R[1, 0], t_wa.R[0, 0])
        labels.append(Box3D(center_a, box.size, yaw_a))
    return sweep, labels
