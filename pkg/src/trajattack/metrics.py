"""Detection evaluation: 3D IoU, average precision, binning, drop reports.

AP uses all-point (continuous) interpolation with the precision envelope;
matching is greedy in score order with each ground-truth box used at most
once. Depth and point-count bins use ignored-gt semantics: a detection
whose best match is an out-of-bin box is dropped from the bin's ranking
rather than counted as a false positive.

All functions here are pure and safe for concurrent use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from shapely.geometry import Polygon

from .surrogate import Box3D, Detection


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation protocol knobs; defaults mirror the attack study setup."""

    iou_threshold: float = 0.7
    depth_edges: tuple = (0.0, 30.0, 50.0, 70.0)
    center_thresholds: tuple = (0.5, 1.0, 2.0, 4.0)
    # point-count difficulty bins on the clean sweep: [lo, hi] inclusive
    point_bins: tuple = ((100, None), (20, 99), (1, 19))

    def depth_tags(self) -> List[str]:
        e = self.depth_edges
        return [f"{e[i]:g}-{e[i + 1]:g}m" for i in range(len(e) - 1)]

    def point_tags(self) -> List[str]:
        tags = []
        for lo, hi in self.point_bins:
            tags.append(f"pts>={lo}" if hi is None else f"pts{lo}-{hi}")
        return tags


@dataclass
class DropEntry:
    absolute: float
    relative: Optional[float]  # None when the before-AP is 0 (undefined)


@dataclass
class EvalReport:
    """Per-bin AP values plus center-distance AP and regularizer stats.

    ``undefined`` flags bins with no ground truth (their AP is reported as
    0). ``drop`` is filled by performance_drop when comparing against a
    baseline report. ``pr_all`` holds the (recall, precision) arrays of the
    unbinned ranking for plotting.
    """

    ap_by_bin: Dict[str, float]
    undefined: Dict[str, bool]
    ap_center: Dict[float, float]
    ap_center_mean: float
    regularizer_stats: Dict[str, float] = field(default_factory=dict)
    drop: Optional[Dict[str, DropEntry]] = None
    pr_all: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def to_json_dict(self) -> dict:
        out = {
            "ap_by_bin": {k: float(v) for k, v in self.ap_by_bin.items()},
            "undefined": dict(self.undefined),
            "ap_center": {str(k): float(v) for k, v in self.ap_center.items()},
            "ap_center_mean": float(self.ap_center_mean),
            "regularizer_stats": {k: float(v) for k, v in self.regularizer_stats.items()},
        }
        if self.drop is not None:
            out["drop"] = {
                k: {"absolute": d.absolute, "relative": d.relative}
                for k, d in self.drop.items()
            }
        if self.pr_all is not None:
            out["pr_all"] = {
                "recall": [float(r) for r in self.pr_all[0]],
                "precision": [float(p) for p in self.pr_all[1]],
            }
        return out


# ---------------------------------------------------------------------------
# IoU


def _bev_polygon(box: Box3D) -> Polygon:
    return Polygon(box.corners_bev())


def iou3d(a: Box3D, b: Box3D) -> float:
    """3D IoU: yaw-rotated BEV rectangle intersection times vertical overlap.

    Symmetric; degenerate zero-area configurations return 0.
    """
    inter_area = _bev_polygon(a).intersection(_bev_polygon(b)).area
    if inter_area <= 0.0:
        return 0.0
    za0, za1 = a.z_range()
    zb0, zb1 = b.z_range()
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0.0:
        return 0.0
    inter = inter_area * dz
    union = a.volume() + b.volume() - inter
    if union <= 0.0:
        return 0.0
    return float(inter / union)


def bev_center_distance(a: Box3D, b: Box3D) -> float:
    return float(math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]))


# ---------------------------------------------------------------------------
# average precision


def _sort_by_score(dets: Sequence[Detection]) -> List[Detection]:
    order = np.argsort([-d.score for d in dets], kind="stable")
    return [dets[i] for i in order]


def _envelope_ap(tp_flags: np.ndarray, n_gt: int) -> Tuple[float, np.ndarray, np.ndarray]:
    """All-point AP from per-rank TP flags: area under the precision
    envelope over recall."""
    if n_gt == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    tp = np.cumsum(tp_flags)
    ranks = np.arange(1, len(tp_flags) + 1)
    recall = tp / n_gt
    precision = tp / ranks
    if len(recall) == 0:
        return 0.0, recall, precision
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap), recall, precision


def _greedy_match(dets: Sequence[Detection], gts: Sequence[Box3D],
                  affinity, threshold: float, larger_is_better: bool,
                  ignored_gts: Sequence[Box3D] = ()) -> np.ndarray:
    """Per-rank flags: 1 TP, 0 FP, -1 ignored (matched an ignored gt).

    Detections are visited in score order; each one greedily claims the
    best still-unmatched ground truth that passes the threshold.
    """
    dets = _sort_by_score(dets)
    used = [False] * len(gts)
    used_ign = [False] * len(ignored_gts)
    flags = np.zeros(len(dets))
    for k, det in enumerate(dets):
        best_i, best_a = -1, None
        for i, gt in enumerate(gts):
            if used[i]:
                continue
            a = affinity(det.box, gt)
            ok = a >= threshold if larger_is_better else a <= threshold
            if not ok:
                continue
            if best_a is None or (a > best_a if larger_is_better else a < best_a):
                best_i, best_a = i, a
        if best_i >= 0:
            used[best_i] = True
            flags[k] = 1.0
            continue
        # unmatched: drop it when it explains an ignored (out-of-bin) gt
        hit_ignored = False
        for i, gt in enumerate(ignored_gts):
            if used_ign[i]:
                continue
            a = affinity(det.box, gt)
            if (a >= threshold) if larger_is_better else (a <= threshold):
                used_ign[i] = True
                hit_ignored = True
                break
        flags[k] = -1.0 if hit_ignored else 0.0
    return flags


def _ap_from_flags(flags: np.ndarray, n_gt: int):
    kept = flags[flags >= 0.0]
    return _envelope_ap(kept, n_gt)


def average_precision(dets: Sequence[Detection], gts: Sequence[Box3D],
                      iou_thresh: float, ignored_gts: Sequence[Box3D] = ()) -> float:
    """AP with IoU-threshold matching. Empty ground truth reports 0 (the
    undefined flag lives in EvalReport)."""
    if len(gts) == 0:
        return 0.0
    flags = _greedy_match(dets, gts, iou3d, iou_thresh, True, ignored_gts)
    return _ap_from_flags(flags, len(gts))[0]


def center_distance_ap(dets: Sequence[Detection], gts: Sequence[Box3D],
                       thresholds: Sequence[float]) -> Tuple[Dict[float, float], float]:
    """AP per BEV center-distance threshold plus the mean over thresholds."""
    by_thr: Dict[float, float] = {}
    for thr in thresholds:
        if len(gts) == 0:
            by_thr[float(thr)] = 0.0
            continue
        flags = _greedy_match(dets, gts, bev_center_distance, thr, False)
        by_thr[float(thr)] = _ap_from_flags(flags, len(gts))[0]
    mean = float(np.mean(list(by_thr.values()))) if by_thr else 0.0
    return by_thr, mean


def bin_by_depth(gts: Sequence[Box3D], edges: Sequence[float] = (0.0, 30.0, 50.0, 70.0)) -> List[int]:
    """Bin index per box by BEV center distance from the origin; bins are
    left-closed right-open; beyond the last edge yields -1 (excluded)."""
    out = []
    for gt in gts:
        d = math.hypot(gt.center[0], gt.center[1])
        idx = -1
        for i in range(len(edges) - 1):
            if edges[i] <= d < edges[i + 1]:
                idx = i
                break
        out.append(idx)
    return out


def count_points_in_boxes(points: np.ndarray, gts: Sequence[Box3D]) -> np.ndarray:
    """Hard point count inside each box (for difficulty binning)."""
    pts = np.asarray(points, dtype=float)
    counts = np.zeros(len(gts), dtype=int)
    if pts.shape[0] == 0:
        return counts
    for i, gt in enumerate(gts):
        local = (pts - gt.center) @ gt.rotation()
        inside = np.all(np.abs(local) <= gt.size / 2.0, axis=1)
        counts[i] = int(np.count_nonzero(inside))
    return counts


def evaluate_detections(dets: Sequence[Detection], gts: Sequence[Box3D],
                        cfg: EvalConfig, clean_point_counts: Optional[np.ndarray] = None,
                        regularizer_stats: Optional[Dict[str, float]] = None) -> EvalReport:
    """Assemble the full per-scene report: overall AP, depth bins,
    point-count bins (when clean counts are supplied), center-distance AP."""
    ap_by_bin: Dict[str, float] = {}
    undefined: Dict[str, bool] = {}

    flags = _greedy_match(dets, gts, iou3d, cfg.iou_threshold, True) if gts else np.zeros(0)
    ap_all, recall, precision = _ap_from_flags(flags, len(gts))
    ap_by_bin["all"] = ap_all
    undefined["all"] = len(gts) == 0

    depth_idx = bin_by_depth(gts, cfg.depth_edges)
    for b, tag in enumerate(cfg.depth_tags()):
        in_bin = [g for g, i in zip(gts, depth_idx) if i == b]
        out_bin = [g for g, i in zip(gts, depth_idx) if i != b]
        undefined[tag] = len(in_bin) == 0
        if in_bin:
            fl = _greedy_match(dets, in_bin, iou3d, cfg.iou_threshold, True, out_bin)
            ap_by_bin[tag] = _ap_from_flags(fl, len(in_bin))[0]
        else:
            ap_by_bin[tag] = 0.0

    if clean_point_counts is not None:
        counts = np.asarray(clean_point_counts)
        for (lo, hi), tag in zip(cfg.point_bins, cfg.point_tags()):
            sel = (counts >= lo) if hi is None else ((counts >= lo) & (counts <= hi))
            in_bin = [g for g, s in zip(gts, sel) if s]
            out_bin = [g for g, s in zip(gts, sel) if not s]
            undefined[tag] = len(in_bin) == 0
            if in_bin:
                fl = _greedy_match(dets, in_bin, iou3d, cfg.iou_threshold, True, out_bin)
                ap_by_bin[tag] = _ap_from_flags(fl, len(in_bin))[0]
            else:
                ap_by_bin[tag] = 0.0

    ap_center, ap_center_mean = center_distance_ap(dets, gts, cfg.center_thresholds)
    return EvalReport(
        ap_by_bin=ap_by_bin,
        undefined=undefined,
        ap_center=ap_center,
        ap_center_mean=ap_center_mean,
        regularizer_stats=dict(regularizer_stats or {}),
        pr_all=(recall, precision),
    )


def performance_drop(before: EvalReport, after: EvalReport) -> Dict[str, DropEntry]:
    """Absolute and relative AP drop per bin; relative is None (flagged)
    where the before-AP is 0. Raises on mismatched bin structures."""
    if set(before.ap_by_bin) != set(after.ap_by_bin):
        raise ValueError("reports have different bin structures")
    out: Dict[str, DropEntry] = {}
    for tag, b in before.ap_by_bin.items():
        a = after.ap_by_bin[tag]
        absolute = b - a
        relative = (b - a) / b if b > 0.0 else None
        out[tag] = DropEntry(float(absolute), None if relative is None else float(relative))
    return out
