"""Packet partitioning, motion-distortion simulation, and compensation.

A full sweep is split into N azimuth packets; packet n is tied to the n-th
interpolated frame. Distortion re-expresses packet n in its capture frame
(frame n), compensation maps it back to keyframe A, optionally with an
additive per-packet perturbation of the compensation transform. The
differentiable variant routes every output coordinate through an autodiff
tape so gradients reach the perturbation.

Azimuth convention: degrees, counter-clockwise from +x in the sensor frame,
sector n covers [start + n*360/N, start + (n+1)*360/N) modulo 360.

distort/compensate are pure; sweep_as_function is bound to one tape and must
stay on that tape's thread.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .geometry import InterpolatedTrack, relative_transform

REF_KEYFRAME = "keyframe-A"
REF_CAPTURE = "capture-frames"

PointsLike = Union[np.ndarray, ad.Node]


@dataclass
class Packet:
    """Points of one azimuth sector.

    ``points`` is (m_n, 3) in meters; a differentiable sweep carries an
    autodiff Node of the same shape instead. ``azimuth_range`` is [lo, hi)
    in degrees in the capture-ordering frame; hi <= lo means the sector
    wraps through 360. Packets may be empty.
    """

    points: PointsLike
    frame_index: int
    azimuth_range: tuple
    intensity: Optional[np.ndarray] = None

    @property
    def n_points(self) -> int:
        return ad.value_of(self.points).shape[0]

    def point_values(self) -> np.ndarray:
        return ad.value_of(self.points)

    def contains_azimuth(self, az_deg: float) -> bool:
        lo, hi = self.azimuth_range
        a = az_deg % 360.0
        if hi <= lo:
            return a >= lo or a < hi
        return lo <= a < hi


@dataclass
class Sweep:
    """Ordered packet list plus the frame tag the coordinates live in."""

    packets: List[Packet]
    reference: str

    def __post_init__(self):
        if self.reference not in (REF_KEYFRAME, REF_CAPTURE):
            raise ValueError(f"unknown sweep reference {self.reference!r}")
        for n, p in enumerate(self.packets):
            if p.frame_index != n:
                raise ValueError("packets must be ordered by frame_index 0..N-1")

    @property
    def n_packets(self) -> int:
        return len(self.packets)

    @property
    def m(self) -> int:
        return sum(p.n_points for p in self.packets)

    def all_points(self) -> PointsLike:
        """Concatenate packet points in index order (differentiable when
        the packets hold tape nodes). Order is stable, so pointwise cloud
        distances are well defined."""
        if not self.packets:
            return np.zeros((0, 3))
        return ad.concat([p.points for p in self.packets], axis=0)

    def point_values(self) -> np.ndarray:
        if not self.packets:
            return np.zeros((0, 3))
        return np.concatenate([p.point_values() for p in self.packets], axis=0)

    def intensity_values(self) -> Optional[np.ndarray]:
        if any(p.intensity is None for p in self.packets):
            return None
        return np.concatenate([p.intensity for p in self.packets])

    def packet_counts(self) -> np.ndarray:
        return np.array([p.n_points for p in self.packets], dtype=int)


def azimuth_deg(points: np.ndarray) -> np.ndarray:
    """Azimuth of each point in [0, 360), CCW from +x."""
    pts = np.asarray(points, dtype=float)
    if pts.shape[0] == 0:
        return np.zeros(0)
    return np.degrees(np.arctan2(pts[:, 1], pts[:, 0])) % 360.0


def partition_packets(points: np.ndarray, n_steps: int, start_azimuth: float = 0.0,
                      intensity: Optional[np.ndarray] = None) -> List[Packet]:
    """Assign each point to the azimuth sector it falls in.

    Points must be expressed in the keyframe-A sensor frame. The union of
    the returned packets is exactly the input set (no duplicates); empty
    sectors yield empty packets.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    width = 360.0 / n_steps
    az = (azimuth_deg(pts) - start_azimuth) % 360.0
    idx = np.minimum((az / width).astype(int), n_steps - 1)
    packets = []
    for n in range(n_steps):
        sel = idx == n
        lo = (start_azimuth + n * width) % 360.0
        hi = (start_azimuth + (n + 1) * width) % 360.0
        packets.append(Packet(
            points=pts[sel],
            frame_index=n,
            azimuth_range=(lo, hi),
            intensity=None if intensity is None else np.asarray(intensity)[sel],
        ))
    return packets


def sweep_from_points(points: np.ndarray, n_steps: int, start_azimuth: float = 0.0,
                      intensity: Optional[np.ndarray] = None) -> Sweep:
    return Sweep(partition_packets(points, n_steps, start_azimuth, intensity), REF_KEYFRAME)


def _check_lengths(sweep: Sweep, track: InterpolatedTrack):
    if sweep.n_packets != track.n_steps:
        raise ValueError(
            f"packet count {sweep.n_packets} does not match track length {track.n_steps}")


def distort(sweep_at_a: Sweep, track: InterpolatedTrack) -> Sweep:
    """Re-express packet n in its capture frame: p_n = T^n_A p_A.

    T^n_A = (T^W_n)^-1 T^W_A with T^W_A the track's first transform. Point
    counts and intra-packet order are preserved.
    """
    if sweep_at_a.reference != REF_KEYFRAME:
        raise ValueError("distort expects a keyframe-A referenced sweep")
    _check_lengths(sweep_at_a, track)
    t_wa = track[0]
    packets = []
    for packet in sweep_at_a.packets:
        rel = relative_transform(track[packet.frame_index], t_wa)
        packets.append(Packet(rel.apply(packet.point_values()), packet.frame_index,
                              packet.azimuth_range, packet.intensity))
    return Sweep(packets, REF_CAPTURE)


def _compensation_transforms(track: InterpolatedTrack):
    """Per-packet (R, t) of T^A_n, the inverse of the distortion map."""
    t_wa = track[0]
    out = []
    for n in range(track.n_steps):
        rel = relative_transform(t_wa, track[n])
        out.append((rel.R, rel.t))
    return out


def compensate(distorted: Sweep, track: InterpolatedTrack, delta=None) -> Sweep:
    """Map packet n back to keyframe A: p_A = (T^A_n + delta(n)) p_n.

    ``delta`` (a Perturbation, or None) is added entrywise to the rotation
    and translation blocks of T^A_n, modeling a spoofed ego pose consumed by
    motion correction. Concatenation order follows packet index.
    """
    if distorted.reference != REF_CAPTURE:
        raise ValueError("compensate expects a capture-frames referenced sweep")
    _check_lengths(distorted, track)
    transforms = _compensation_transforms(track)
    packets = []
    for packet in distorted.packets:
        n = packet.frame_index
        r, t = transforms[n]
        if delta is not None:
            r = r + delta.R_tilde[n]
            t = t + delta.t_tilde[n]
        pts = packet.point_values() @ r.T + t
        packets.append(Packet(pts, n, packet.azimuth_range, packet.intensity))
    return Sweep(packets, REF_KEYFRAME)


def sweep_as_function(packets: Sequence[Packet], track: InterpolatedTrack, delta,
                      tape: ad.Tape) -> Sweep:
    """Differentiable compensation: the sweep as a function of the trajectory
    perturbation.

    Values match ``compensate`` exactly; every output coordinate is a tape
    node whose gradient with respect to the perturbation entries (or the
    polynomial coefficients) is defined. Registers parameter slots
    ``delta_t`` / ``delta_R`` (or ``beta`` in polynomial mode) on the tape.
    """
    packets = list(packets)
    if len(packets) != track.n_steps:
        raise ValueError(
            f"packet count {len(packets)} does not match track length {track.n_steps}")
    n_steps = track.n_steps

    if delta.mode == "polynomial":
        beta = tape.param("beta", delta.beta)
        basis = _poly_basis(n_steps)
        t_node = ad.matmul(basis, beta)  # (N, 3)
        tape.aux["t_table"] = t_node
        r_node = None
    else:
        t_node = tape.param("delta_t", delta.t_tilde)
        r_node = tape.param("delta_R", delta.R_tilde)

    transforms = _compensation_transforms(track)
    out_packets = []
    for packet in packets:
        n = packet.frame_index
        r_const, t_const = transforms[n]
        r_eff = r_const if r_node is None else ad.add(r_const, ad.index0(r_node, n))
        t_eff = ad.add(t_const, ad.index0(t_node, n))
        pts = ad.add(ad.matvec3(r_eff, packet.point_values()), t_eff)
        out_packets.append(Packet(pts, n, packet.azimuth_range, packet.intensity))
    return Sweep(out_packets, REF_KEYFRAME)


def _poly_basis(n_steps: int) -> np.ndarray:
    """Vandermonde basis [1, s, s^2, s^3] with s = n/(N-1) in [0, 1]."""
    s = np.arange(n_steps, dtype=float) / (n_steps - 1)
    return np.stack([np.ones_like(s), s, s ** 2, s ** 3], axis=1)
