import math
import warnings

import numpy as np
import pytest

from trajattack import autodiff as ad
from trajattack.attack import Perturbation
from trajattack.geometry import Pose, interpolate_track
from trajattack.surrogate import (
    Box3D,
    Detection,
    DetectorConfig,
    classification_score,
    detect,
    detector_loss,
    expected_count,
    regression_estimate,
    snapped_box,
    soft_point_in_box,
    tau_effective,
)
from trajattack.sweep import Packet, REF_CAPTURE, REF_KEYFRAME, Sweep, distort, sweep_as_function, sweep_from_points

PRIOR = np.array([4.5, 1.9, 1.7])


def flat_config(**kw):
    """Config with the pose-adaptive threshold disabled (fixed tau)."""
    base = dict(min_z=-100.0, count_fraction=0.0, count_threshold=20.0, anchor_stride=0.0)
    base.update(kw)
    return DetectorConfig(**base)


def single_packet_sweep(points):
    return Sweep([Packet(np.asarray(points, float), 0, (0.0, 360.0))], REF_KEYFRAME)


def box_at(center, yaw=0.0, size=PRIOR):
    return Box3D(np.asarray(center, float), np.asarray(size, float), yaw)


def cluster_in_box(rng, box, n):
    local = rng.uniform(-0.5, 0.5, size=(n, 3)) * (box.size * 0.9)
    return local @ box.rotation().T + box.center


# ---------------------------------------------------------------------------
# soft_point_in_box


def test_soft_membership_center_saturates():
    box = box_at([0, 0, 0])
    w = soft_point_in_box(np.zeros(3), box, 50.0)
    assert w > 0.999


def test_soft_membership_far_outside():
    box = box_at([0, 0, 0], size=(2.0, 2.0, 2.0))
    w = soft_point_in_box(np.array([2.0, 0.0, 0.0]), box, 50.0)  # 1 m beyond the face
    assert w < 1e-6


def test_soft_membership_on_face_is_half():
    box = box_at([0, 0, 0], size=(2.0, 2.0, 2.0))
    w = soft_point_in_box(np.array([1.0, 0.0, 0.0]), box, 50.0)
    assert abs(w - 0.5 * (1.0 / (1.0 + math.exp(-50.0))) ** 2) < 1e-6


def test_soft_membership_monotone_in_each_axis():
    box = box_at([0, 0, 0], yaw=0.4)
    rng = np.random.default_rng(0)
    d = rng.uniform(0.1, 1.0, size=3)
    for axis in range(3):
        prev = None
        for s in np.linspace(0.0, 3.0, 13):
            local = np.zeros(3)
            local[axis] = s * d[axis]
            p = box.rotation() @ local + box.center
            w = soft_point_in_box(p, box, 50.0)
            if prev is not None:
                assert w <= prev + 1e-12
            prev = w
            assert 0.0 < w <= 1.0  # mathematically < 1, saturates in float


def test_box_validation():
    with pytest.raises(ValueError):
        Box3D(np.zeros(3), np.array([0.0, 1.0, 1.0]), 0.0)
    assert Box3D(np.zeros(3), np.ones(3), 3.5 * math.pi).yaw == pytest.approx(-0.5 * math.pi)


def test_detection_score_range():
    with pytest.raises(ValueError):
        Detection(box_at([0, 0, 0]), 1.5)


# ---------------------------------------------------------------------------
# classification_score


def test_classification_empty_sweep():
    cfg = flat_config()
    score = classification_score(single_packet_sweep(np.zeros((0, 3))), box_at([5, 0, 0]), cfg)
    expect = 1.0 / (1.0 + math.exp(cfg.score_gain * cfg.count_threshold))
    assert abs(score - expect) < 1e-12


def test_classification_saturates_with_2tau_points():
    cfg = flat_config()
    rng = np.random.default_rng(1)
    box = box_at([10, 0, 0], yaw=0.3)
    pts = cluster_in_box(rng, box, int(2 * cfg.count_threshold / 0.4))
    score = classification_score(single_packet_sweep(pts), box, cfg)
    assert score > 0.99


def test_classification_decreases_when_translated_out():
    cfg = flat_config()
    rng = np.random.default_rng(2)
    box = box_at([10, 0, 0])
    pts = cluster_in_box(rng, box, 80)
    prev = None
    for off in np.linspace(0.0, 3.0, 10):
        score = classification_score(single_packet_sweep(pts + [0.0, off, 0.0]), box, cfg)
        if prev is not None:
            assert score <= prev + 1e-9
        prev = score


def test_classification_permutation_invariant():
    cfg = flat_config()
    rng = np.random.default_rng(3)
    box = box_at([8, 3, 0], yaw=1.0)
    pts = cluster_in_box(rng, box, 60)
    a = classification_score(single_packet_sweep(pts), box, cfg)
    b = classification_score(single_packet_sweep(pts[::-1]), box, cfg)
    assert a == pytest.approx(b, abs=1e-12)


def test_tau_effective_scales_with_range():
    cfg = DetectorConfig(rays_per_deg_az=2.5, rays_per_deg_el=1.5, count_fraction=0.68)
    near = box_at([10, 0, -0.95])
    far = box_at([50, 0, -0.95])
    assert tau_effective(near, cfg) > tau_effective(far, cfg)
    assert tau_effective(far, cfg) >= cfg.count_threshold


def test_expected_count_uses_beam_rows():
    elev = tuple(np.linspace(-14.0, 2.0, 24))
    cfg = DetectorConfig(beam_elevations=elev, rays_per_deg_az=2.5)
    box = box_at([30, 0, -0.95])
    n = expected_count(box, cfg)
    assert n > 0
    # pushing the box above every beam kills the prediction
    high = box_at([30, 0, 40.0])
    assert expected_count(high, cfg) == 0.0


def test_snapped_box_quantizes_center():
    cfg = DetectorConfig(anchor_stride=0.3)
    box = box_at([10.14, -3.01, -0.95], yaw=0.7)
    snap = snapped_box(box, cfg)
    assert snap.center[0] == pytest.approx(10.2)
    assert snap.center[1] == pytest.approx(-3.0)
    assert snap.yaw == box.yaw
    assert snapped_box(box, DetectorConfig(anchor_stride=0.0)) is box


# ---------------------------------------------------------------------------
# regression_estimate


def test_regression_symmetric_points_give_center():
    cfg = flat_config()
    box = box_at([5, 5, 0], yaw=0.6)
    local = np.array([[1.0, 0.3, 0.2], [-1.0, -0.3, -0.2], [0.5, -0.4, 0.1], [-0.5, 0.4, -0.1]])
    pts = local @ box.rotation().T + box.center
    est = regression_estimate(single_packet_sweep(pts), box, cfg)
    assert np.allclose(est, box.center, atol=1e-9)


def test_regression_tracks_small_shift():
    cfg = flat_config()
    rng = np.random.default_rng(4)
    box = box_at([12, 0, 0])
    pts = cluster_in_box(rng, box, 400)
    base = np.asarray(ad.value_of(regression_estimate(single_packet_sweep(pts), box, cfg)))
    d = np.array([0.3, 0.0, 0.0])
    shifted = np.asarray(ad.value_of(regression_estimate(single_packet_sweep(pts + d), box, cfg)))
    move = shifted - base
    assert abs(move[0] - d[0]) < 0.1 * d[0]


def test_regression_fallback_to_center():
    cfg = flat_config()
    box = box_at([5, 0, 0])
    est = regression_estimate(single_packet_sweep(np.array([[500.0, 500.0, 500.0]])), box, cfg)
    assert np.array_equal(est, box.center)
    est2 = regression_estimate(single_packet_sweep(np.zeros((0, 3))), box, cfg)
    assert np.array_equal(est2, box.center)


# ---------------------------------------------------------------------------
# detector_loss


def diff_sweep_setup(rng, n_steps=5, n_points=120):
    box = box_at([9, 1, 0], yaw=0.5)
    pts = cluster_in_box(rng, box, n_points)
    pa = Pose.identity(0.0)
    pb = Pose([1.0, 0.2, 0.0], [1, 0, 0, 0], 0.5)
    track = interpolate_track(pa, pb, n_steps)
    distorted = distort(sweep_from_points(pts, n_steps), track)
    return box, track, distorted


def test_perfect_sweep_has_near_zero_loss():
    cfg = flat_config(count_threshold=10.0)
    rng = np.random.default_rng(5)
    box = box_at([9, 1, 0], yaw=0.5)
    pts = cluster_in_box(rng, box, 200)
    loss = detector_loss(single_packet_sweep(pts), [box], "classification", cfg)
    assert abs(float(loss)) < 1e-6  # L~ = -BCE(score ~ 1, 1) ~ 0


def test_zero_delta_gradient_finite_and_nonzero():
    cfg = flat_config(count_threshold=10.0)
    rng = np.random.default_rng(6)
    box, track, distorted = diff_sweep_setup(rng)
    tape = ad.Tape()
    diff = sweep_as_function(distorted.packets, track, Perturbation.zeros("full", track.n_steps), tape)
    loss = detector_loss(diff, [box], "classification", cfg)
    grads = ad.backward(tape, loss)
    occupied = [p.frame_index for p in distorted.packets if p.n_points > 0]
    g = grads.d_t[occupied]
    assert np.all(np.isfinite(g))
    assert np.any(g != 0.0)


def test_empty_labels_warn_and_zero():
    cfg = flat_config()
    rng = np.random.default_rng(7)
    box, track, distorted = diff_sweep_setup(rng)
    tape = ad.Tape()
    diff = sweep_as_function(distorted.packets, track, Perturbation.zeros("full", track.n_steps), tape)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        loss = detector_loss(diff, [], "classification", cfg)
    assert caught and "empty" in str(caught[0].message)
    assert float(ad.value_of(loss)) == 0.0
    grads = ad.backward(tape, loss)
    assert np.array_equal(grads.d_t, np.zeros((track.n_steps, 3)))


def test_loss_descends_along_signed_gradient_first_step():
    # marginal cluster so the classification score stays away from float
    # saturation and the loss is representable
    cfg = flat_config(count_threshold=20.0)
    wins = 0
    trials = 12
    for seed in range(trials):
        rng = np.random.default_rng(100 + seed)
        box, track, distorted = diff_sweep_setup(rng, n_points=40)

        def value(delta):
            tape = ad.Tape()
            diff = sweep_as_function(distorted.packets, track, delta, tape)
            loss = detector_loss(diff, [box], "classification", cfg)
            return tape, loss

        zero = Perturbation.zeros("full", track.n_steps)
        tape, loss = value(zero)
        grads = ad.backward(tape, loss)
        step = Perturbation("full",
                            np.clip(-0.1 * np.sign(grads.d_t), -0.1, 0.1),
                            np.clip(-0.01 * np.sign(grads.d_R), -0.01, 0.01))
        _, after = value(step)
        if float(after.value) < float(loss.value):
            wins += 1
    assert wins >= 0.9 * trials


def test_detector_loss_rejects_unknown_branch():
    cfg = flat_config()
    with pytest.raises(ValueError):
        detector_loss(single_packet_sweep(np.zeros((1, 3))), [box_at([0, 0, 0])], "segmentation", cfg)


# ---------------------------------------------------------------------------
# detect


def detect_config():
    # fixed threshold, ground gate far below the synthetic clusters
    return flat_config(count_threshold=10.0, score_floor=0.5, min_cluster_points=5)


def test_detect_empty_sweep():
    assert detect(single_packet_sweep(np.zeros((0, 3))), detect_config()) == []


def test_detect_single_cluster_near_centroid():
    rng = np.random.default_rng(8)
    box = box_at([12, 4, 0], yaw=0.9)
    pts = cluster_in_box(rng, box, 300)
    dets = detect(single_packet_sweep(pts), detect_config())
    assert dets
    top = dets[0]
    centroid = pts.mean(axis=0)
    assert math.hypot(top.box.center[0] - centroid[0], top.box.center[1] - centroid[1]) < 0.5


def test_detect_nms_keeps_one_per_cluster():
    rng = np.random.default_rng(9)
    box = box_at([10, -6, 0], yaw=-0.4)
    pts = cluster_in_box(rng, box, 250)
    dets = detect(single_packet_sweep(pts), detect_config())
    assert len(dets) == 1


def test_detect_deterministic():
    rng = np.random.default_rng(10)
    box = box_at([14, 2, 0], yaw=0.2)
    pts = cluster_in_box(rng, box, 200)
    sweep = single_packet_sweep(pts)
    cfg = detect_config()
    a = detect(sweep, cfg)
    b = detect(sweep, cfg)
    assert len(a) == len(b)
    for da, db in zip(a, b):
        assert da.score == db.score
        assert np.array_equal(da.box.center, db.box.center)
        assert da.box.yaw == db.box.yaw


def test_detect_sorted_by_score():
    rng = np.random.default_rng(11)
    pts1 = cluster_in_box(rng, box_at([10, 0, 0]), 300)
    pts2 = cluster_in_box(rng, box_at([0, 14, 0], yaw=1.0), 18)
    dets = detect(single_packet_sweep(np.vstack([pts1, pts2])), detect_config())
    scores = [d.score for d in dets]
    assert scores == sorted(scores, reverse=True)
