"""File formats and run configuration.

Pose files are line-oriented text (stamp, translation, quaternion); point
files are consecutive little-endian float32 x,y,z,intensity records with a
sidecar text file carrying the per-packet counts (raw binaries have no
packet boundaries). The run configuration is a line-oriented INI-style text
with explicit defaults; unknown keys are rejected and parse/emit round-trips
are value-stable.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attack import AttackConfig, Perturbation
from .geometry import Pose
from .metrics import EvalConfig, EvalReport
from .scene import SceneParams, SensorModel, TrajectoryParams
from .surrogate import Box3D, Detection, DetectorConfig
from .sweep import Packet, Sweep, REF_CAPTURE, REF_KEYFRAME


class FileFormatError(ValueError):
    """Malformed input file (message carries the offending location)."""


# ---------------------------------------------------------------------------
# pose files


def write_poses(poses: Sequence[Pose], path: str) -> None:
    """One pose per line: stamp tx ty tz qw qx qy qz, 17 significant digits."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# stamp tx ty tz qw qx qy qz\n")
        for pose in poses:
            stamp = 0.0 if pose.stamp is None else pose.stamp
            fields = [stamp, *pose.t, *pose.q]
            fh.write(" ".join(f"{v:.17g}" for v in fields) + "\n")


def read_poses(path: str) -> List[Pose]:
    """Parse a pose file; '#' comments allowed. Raises FileFormatError with
    the line number on malformed lines, non-unit quaternions (beyond 1e-6),
    or non-increasing stamps."""
    poses: List[Pose] = []
    last_stamp = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 8:
                raise FileFormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                values = [float(p) for p in parts]
            except ValueError as err:
                raise FileFormatError(f"{path}:{lineno}: {err}") from None
            stamp = values[0]
            t = np.array(values[1:4])
            q = np.array(values[4:8])
            if abs(np.linalg.norm(q) - 1.0) > 1e-6:
                raise FileFormatError(f"{path}:{lineno}: quaternion is not unit length")
            if last_stamp is not None and stamp <= last_stamp:
                raise FileFormatError(f"{path}:{lineno}: stamps must be strictly increasing")
            last_stamp = stamp
            poses.append(Pose(t, q, stamp))
    return poses


# ---------------------------------------------------------------------------
# point files


_RECORD_BYTES = 16  # 4 little-endian float32: x y z intensity


def _sidecar_path(path: str) -> str:
    return path + ".counts"


def write_points(sw: Sweep, path: str) -> None:
    """float32le x,y,z,intensity records plus a sidecar with the reference
    tag and per-packet counts."""
    pts = sw.point_values().astype("<f4")
    intensity = sw.intensity_values()
    if intensity is None:
        intensity = np.zeros(pts.shape[0])
    rec = np.concatenate([pts, intensity.astype("<f4")[:, None]], axis=1).astype("<f4")
    rec.tofile(path)
    with open(_sidecar_path(path), "w", encoding="utf-8") as fh:
        fh.write(f"# reference={sw.reference}\n")
        for count in sw.packet_counts():
            fh.write(f"{count}\n")


def read_points(path: str, fallback_steps: Optional[int] = None,
                reference: Optional[str] = None) -> Sweep:
    """Rebuild a Sweep from a point binary plus its sidecar.

    Without a sidecar the packet structure is reconstructed from azimuth
    with ``fallback_steps`` sectors (approximate for real data). Size
    mismatches raise FileFormatError naming expected and actual byte counts.
    """
    size = os.path.getsize(path)
    if size % _RECORD_BYTES != 0:
        raise FileFormatError(
            f"{path}: size {size} B is not a multiple of the {_RECORD_BYTES} B record")
    raw = np.fromfile(path, dtype="<f4").reshape(-1, 4)
    pts = raw[:, :3].astype(float)
    intensity = raw[:, 3].astype(float)

    sidecar = _sidecar_path(path)
    if not os.path.exists(sidecar):
        if fallback_steps is None:
            raise FileFormatError(f"{sidecar}: sidecar missing and no fallback step count given")
        from .sweep import partition_packets

        return Sweep(partition_packets(pts, fallback_steps, intensity=intensity),
                     reference or REF_KEYFRAME)

    counts: List[int] = []
    ref = reference
    with open(sidecar, "r", encoding="utf-8") as fh:
        for lineno, raw_line in enumerate(fh, start=1):
            line = raw_line.strip()
            if line.startswith("#"):
                if "reference=" in line and ref is None:
                    ref = line.split("reference=", 1)[1].strip()
                continue
            if not line:
                continue
            try:
                counts.append(int(line))
            except ValueError:
                raise FileFormatError(f"{sidecar}:{lineno}: bad count {line!r}") from None
    total = sum(counts)
    if total != pts.shape[0]:
        raise FileFormatError(
            f"{path}: sidecar counts sum to {total} records, file holds {pts.shape[0]} "
            f"({total * _RECORD_BYTES} vs {pts.shape[0] * _RECORD_BYTES} bytes)")
    n_steps = len(counts)
    width = 360.0 / n_steps if n_steps else 360.0
    packets = []
    offset = 0
    for n, count in enumerate(counts):
        sel = slice(offset, offset + count)
        packets.append(Packet(pts[sel], n, ((n * width) % 360.0, ((n + 1) * width) % 360.0),
                              intensity[sel]))
        offset += count
    return Sweep(packets, ref or REF_KEYFRAME)


# ---------------------------------------------------------------------------
# perturbation / labels / detections / reports / traces


def write_perturbation(delta: Perturbation, path: str) -> None:
    payload = {
        "mode": delta.mode,
        "t_tilde": delta.t_tilde.tolist(),
        "R_tilde": delta.R_tilde.tolist(),
        "beta": None if delta.beta is None else delta.beta.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_perturbation(path: str) -> Perturbation:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        return Perturbation(payload["mode"], np.array(payload["t_tilde"], dtype=float),
                            np.array(payload["R_tilde"], dtype=float),
                            None if payload.get("beta") is None else np.array(payload["beta"]))
    except (json.JSONDecodeError, KeyError, ValueError) as err:
        raise FileFormatError(f"{path}: {err}") from None


def write_labels(labels: Sequence[Box3D], path: str) -> None:
    payload = [
        {"id": i, "center": b.center.tolist(), "size": b.size.tolist(), "yaw": b.yaw}
        for i, b in enumerate(labels)
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_labels(path: str) -> List[Box3D]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        return [Box3D(np.array(e["center"]), np.array(e["size"]), e["yaw"]) for e in payload]
    except (json.JSONDecodeError, KeyError, ValueError) as err:
        raise FileFormatError(f"{path}: {err}") from None


def write_detections(dets: Sequence[Detection], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["score", "cx", "cy", "cz", "length", "width", "height", "yaw"])
        for d in dets:
            writer.writerow([repr(float(v)) for v in
                             (d.score, *d.box.center, *d.box.size, d.box.yaw)])


def write_trace_csv(trace, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "objective", "detector_loss", "regularizer"])
        for i, obj, det, reg in trace.rows():
            writer.writerow([i, repr(obj), repr(det), repr(reg)])


def write_report_json(report: EvalReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_report_csv(report: EvalReport, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "ap", "undefined", "drop_abs", "drop_rel"])
        for tag in report.ap_by_bin:
            drop = report.drop.get(tag) if report.drop else None
            writer.writerow([
                tag,
                repr(report.ap_by_bin[tag]),
                int(report.undefined.get(tag, False)),
                "" if drop is None else repr(drop.absolute),
                "" if drop is None or drop.relative is None else repr(drop.relative),
            ])
        for thr, ap in report.ap_center.items():
            writer.writerow([f"center@{thr:g}m", repr(ap), 0, "", ""])
        writer.writerow(["center-mean", repr(report.ap_center_mean), 0, "", ""])


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    """Everything one run needs; defaults mirror the headline attack setup."""

    seed: int = 0
    n_scenes: int = 3
    interpolation_steps: int = 100
    output_dir: str = "out"
    scene: SceneParams = field(default_factory=SceneParams)
    sensor: SensorModel = field(default_factory=SensorModel)
    trajectory: TrajectoryParams = field(default_factory=TrajectoryParams)
    attack: AttackConfig = field(default_factory=AttackConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)


_SECTION_TYPES = {
    "run": None,  # scalar fields of RunConfig
    "scene": SceneParams,
    "sensor": SensorModel,
    "trajectory": TrajectoryParams,
    "attack": AttackConfig,
    "detector": DetectorConfig,
    "evaluation": EvalConfig,
}

_RUN_FIELDS = ("seed", "n_scenes", "interpolation_steps", "output_dir")

# fields with tuple-of-tuples structure need bespoke coding
_NESTED_TUPLE_FIELDS = {("evaluation", "point_bins")}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return str(value)
    if value is None:
        return "none"
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (tuple, list)):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


# fields whose default is None: template used when a value is present
_NULLABLE_TEMPLATES = {
    ("sensor", "elevations"): (0.0,),
    ("sensor", "rays_per_packet"): 0,
    ("detector", "beam_elevations"): (0.0,),
}


def _parse_value(text: str, template):
    """Parse ``text`` following the type of the default value ``template``."""
    text = text.strip()
    if isinstance(template, (bool, np.bool_)):
        return text.lower() in ("1", "true", "yes")
    if isinstance(template, (int, np.integer)):
        return int(text)
    if isinstance(template, (float, np.floating)):
        return float(text)
    if isinstance(template, (tuple, list)):
        if not text:
            return tuple()
        elem = template[0] if len(template) else 0.0
        return tuple(_parse_value(part, elem) for part in text.split(","))
    if isinstance(template, str):
        return text
    raise FileFormatError(f"cannot parse config value {text!r}")


def emit_config(cfg: RunConfig) -> str:
    """Deterministic text form; floats use repr so parse(emit(x)) == x."""
    out = io.StringIO()
    out.write("[run]\n")
    for name in _RUN_FIELDS:
        out.write(f"{name} = {_format_value(getattr(cfg, name))}\n")
    for section, cls in _SECTION_TYPES.items():
        if cls is None:
            continue
        obj = getattr(cfg, section if section != "evaluation" else "evaluation")
        out.write(f"\n[{section}]\n")
        for f in dataclasses.fields(cls):
            value = getattr(obj, f.name)
            if (section, f.name) in _NESTED_TUPLE_FIELDS:
                parts = []
                for lo, hi in value:
                    parts.append(f"{lo}:{'inf' if hi is None else hi}")
                out.write(f"{f.name} = {'; '.join(parts)}\n")
            else:
                out.write(f"{f.name} = {_format_value(value)}\n")
    return out.getvalue()


def parse_config(text: str) -> RunConfig:
    """Parse the INI-style run configuration; unknown sections or keys are
    rejected with their names."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise FileFormatError(f"config parse error: {err}") from None

    run_kwargs = {}
    section_objs = {}
    for section in parser.sections():
        if section not in _SECTION_TYPES:
            raise FileFormatError(f"unknown config section [{section}]")
        cls = _SECTION_TYPES[section]
        if cls is None:
            defaults = RunConfig()
            for key, raw in parser.items(section):
                if key not in _RUN_FIELDS:
                    raise FileFormatError(f"unknown key {key!r} in [run]")
                run_kwargs[key] = _parse_value(raw, getattr(defaults, key))
            continue
        default_obj = cls()
        field_names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in parser.items(section):
            if key not in field_names:
                raise FileFormatError(f"unknown key {key!r} in [{section}]")
            if (section, key) in _NESTED_TUPLE_FIELDS:
                bins = []
                for part in raw.split(";"):
                    lo, hi = part.strip().split(":")
                    bins.append((int(lo), None if hi.strip() == "inf" else int(hi)))
                kwargs[key] = tuple(bins)
                continue
            template = getattr(default_obj, key)
            if (section, key) in _NULLABLE_TEMPLATES:
                if raw.strip().lower() == "none":
                    kwargs[key] = None
                    continue
                template = _NULLABLE_TEMPLATES[(section, key)]
            try:
                kwargs[key] = _parse_value(raw, template)
            except ValueError as err:
                raise FileFormatError(f"bad value for {key!r} in [{section}]: {err}") from None
        section_objs[section] = cls(**kwargs)

    return RunConfig(
        **run_kwargs,
        scene=section_objs.get("scene", SceneParams()),
        sensor=section_objs.get("sensor", SensorModel()),
        trajectory=section_objs.get("trajectory", TrajectoryParams()),
        attack=section_objs.get("attack", AttackConfig()),
        detector=section_objs.get("detector", DetectorConfig()),
        evaluation=section_objs.get("evaluation", EvalConfig()),
    )


def read_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def write_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(emit_config(cfg))
