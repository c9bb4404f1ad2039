"""Trajectory-attack toolkit for motion-compensated LiDAR perception.

Simulates sweep motion distortion from vehicle trajectories, expresses
motion compensation as a differentiable function of the trajectory, and
mounts projected-gradient trajectory perturbations against a differentiable
surrogate box detector, evaluated with detection AP metrics.
"""

from .geometry import (
    InterpolatedTrack,
    Pose,
    RigidTransform,
    interpolate_track,
    lerp_translation,
    pose_to_transform,
    quat_to_rotmat,
    relative_transform,
    slerp,
)
from .sweep import Packet, Sweep, compensate, distort, partition_packets, sweep_as_function
from .autodiff import GradientSet, NumericError, Tape, backward, grad_check, record
from .surrogate import (
    Box3D,
    Detection,
    DetectorConfig,
    classification_score,
    detect,
    detector_loss,
    regression_estimate,
    soft_point_in_box,
)
from .attack import (
    AttackConfig,
    Perturbation,
    attack_objective,
    chamfer,
    coordinate_attack,
    lp_distance,
    pgd_attack,
    pgd_poly_attack,
    poly_eval,
    project_linf,
    random_attack,
    smoothness,
)
from .metrics import (
    EvalConfig,
    EvalReport,
    average_precision,
    bin_by_depth,
    center_distance_ap,
    evaluate_detections,
    iou3d,
    performance_drop,
)
from .scene import (
    PlacementError,
    Scene,
    SceneParams,
    SensorModel,
    TrajectoryParams,
    generate_scene,
    generate_trajectory,
    raycast_sweep,
)

__version__ = "0.1.0"
