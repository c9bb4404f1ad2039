import math

import numpy as np
import pytest

from trajattack import autodiff as ad
from trajattack.attack import (
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
from trajattack.geometry import Pose, interpolate_track, quat_from_yaw
from trajattack.surrogate import Box3D, DetectorConfig, detect
from trajattack.sweep import Packet, REF_KEYFRAME, Sweep, compensate, distort, sweep_from_points

PRIOR = np.array([4.5, 1.9, 1.7])


def toy_scene(seed=0, n_steps=8, n_boxes=2, pts_per_box=60):
    rng = np.random.default_rng(seed)
    boxes = []
    pts = []
    for k in range(n_boxes):
        az = rng.uniform(0, 2 * np.pi)
        r = rng.uniform(8.0, 18.0)
        center = np.array([r * np.cos(az), r * np.sin(az), 0.0])
        box = Box3D(center, PRIOR, rng.uniform(-np.pi, np.pi))
        boxes.append(box)
        local = rng.uniform(-0.5, 0.5, size=(pts_per_box, 3)) * (PRIOR * 0.9)
        pts.append(local @ box.rotation().T + center)
    pa = Pose([0, 0, 0], [1, 0, 0, 0], 0.0)
    pb = Pose([1.2, 0.4, 0.0], quat_from_yaw(0.1), 0.5)
    track = interpolate_track(pa, pb, n_steps)
    sweep = sweep_from_points(np.vstack(pts), n_steps)
    distorted = distort(sweep, track)
    det = DetectorConfig(min_z=-10.0, count_fraction=0.0, count_threshold=25.0)
    return distorted, track, boxes, det


def single_sweep(points):
    return Sweep([Packet(np.asarray(points, float), 0, (0.0, 360.0))], REF_KEYFRAME)


# ---------------------------------------------------------------------------
# Perturbation / project_linf


def test_perturbation_mode_invariants():
    with pytest.raises(ValueError):
        Perturbation("translation", np.zeros((4, 3)), np.ones((4, 3, 3)))
    with pytest.raises(ValueError):
        Perturbation("rotation", np.ones((4, 3)), np.zeros((4, 3, 3)))
    with pytest.raises(ValueError):
        Perturbation("polynomial", np.zeros((4, 3)), np.zeros((4, 3, 3)))  # beta missing


def test_project_within_budget_unchanged():
    delta = Perturbation("full", np.full((5, 3), 0.05), np.full((5, 3, 3), 0.005))
    out = project_linf(delta, 0.1, 0.01)
    assert np.array_equal(out.t_tilde, delta.t_tilde)
    assert np.array_equal(out.R_tilde, delta.R_tilde)


def test_project_clamps_entry():
    delta = Perturbation("translation", np.array([[0.25, -0.3, 0.0]]), np.zeros((1, 3, 3)))
    out = project_linf(delta, 0.1, 0.01)
    assert np.array_equal(out.t_tilde, [[0.1, -0.1, 0.0]])


def test_project_idempotent_bitwise():
    rng = np.random.default_rng(1)
    delta = Perturbation("full", rng.normal(size=(6, 3)), rng.normal(size=(6, 3, 3)))
    once = project_linf(delta, 0.1, 0.01)
    twice = project_linf(once, 0.1, 0.01)
    assert np.array_equal(once.t_tilde, twice.t_tilde)
    assert np.array_equal(once.R_tilde, twice.R_tilde)


# ---------------------------------------------------------------------------
# poly_eval


def test_poly_constant_row():
    beta = np.zeros((4, 3))
    beta[0] = [0.3, -0.2, 0.1]
    table = poly_eval(beta, 10)
    assert np.allclose(table, np.tile(beta[0], (10, 1)))


def test_poly_linear_row_endpoints():
    beta = np.zeros((4, 3))
    beta[1] = [1.0, 2.0, -1.0]
    table = poly_eval(beta, 5)
    assert np.allclose(table[0], 0.0)
    assert np.allclose(table[-1], beta[1])


def test_poly_cubic_midpoint():
    beta = np.zeros((4, 3))
    beta[3] = [0.8, -0.4, 0.16]
    table = poly_eval(beta, 101)
    assert np.allclose(table[50], beta[3] / 8.0)


def test_poly_rejects_small_n():
    with pytest.raises(ValueError):
        poly_eval(np.zeros((4, 3)), 1)


# ---------------------------------------------------------------------------
# smoothness


def test_smoothness_constant_is_zero():
    delta = Perturbation("translation", np.tile([0.05, -0.02, 0.01], (10, 1)), np.zeros((10, 3, 3)))
    assert smoothness(delta) == 0.0


def test_smoothness_alternating_closed_form():
    n, c = 12, 0.07
    t = np.zeros((n, 3))
    t[::2, 0] = c
    t[1::2, 0] = -c
    delta = Perturbation("translation", t, np.zeros((n, 3, 3)))
    expect = math.sqrt((n - 1) * (2 * c) ** 2)
    assert smoothness(delta, lambda_t=1.0, lambda_R=1.0, p=2.0) == pytest.approx(expect, abs=1e-12)


def test_smoothness_rotation_term():
    n = 6
    r = np.zeros((n, 3, 3))
    r[3, 0, 0] = 0.01  # single jump appears in two consecutive differences
    delta = Perturbation("rotation", np.zeros((n, 3)), r)
    expect = math.sqrt(2.0 * 0.01 ** 2)
    assert smoothness(delta) == pytest.approx(expect, abs=1e-15)


def test_smoothness_gradient_matches_fd():
    rng = np.random.default_rng(2)
    n = 7

    def f(x):
        tape = ad.Tape()
        t = tape.param("delta_t", x.reshape(n, 3))

        class Holder:
            t_tilde = t
            R_tilde = None

        s = smoothness(Holder, 1.0, 1.0, 2.0)
        g = ad.backward(tape, s)
        return float(s.value), g.by_slot["delta_t"].ravel()

    res = ad.grad_check(f, rng.normal(scale=0.05, size=n * 3), h=1e-6)
    assert res.max_rel_error < 1e-3


# ---------------------------------------------------------------------------
# lp_distance / chamfer


def test_lp_identical_zero():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(40, 3))
    assert lp_distance(single_sweep(pts), single_sweep(pts.copy())) == 0.0


def test_lp_uniform_shift():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(25, 3))
    shifted = pts + [0.1, 0.0, 0.0]
    assert lp_distance(single_sweep(pts), single_sweep(shifted)) == pytest.approx(0.1, abs=1e-12)


def test_lp_matches_naive_double_loop():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(30, 3))
    b = a + rng.normal(scale=0.2, size=(30, 3))
    p = 2.0
    total = 0.0
    for i in range(30):
        d = math.sqrt(sum((a[i, k] - b[i, k]) ** 2 for k in range(3)))
        total += d ** p
    expect = (total / 30.0) ** (1.0 / p)
    assert lp_distance(single_sweep(a), single_sweep(b), p) == pytest.approx(expect, abs=1e-12)


def test_lp_count_mismatch():
    with pytest.raises(ValueError):
        lp_distance(single_sweep(np.zeros((3, 3))), single_sweep(np.zeros((4, 3))))


def test_chamfer_identical_zero():
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(20, 3))
    assert chamfer(single_sweep(pts), single_sweep(pts.copy())) == 0.0


def test_chamfer_single_pair():
    a = single_sweep(np.array([[0.0, 0.0, 0.0]]))
    b = single_sweep(np.array([[3.0, 4.0, 0.0]]))
    assert chamfer(a, b) == pytest.approx(10.0, abs=1e-12)


def test_chamfer_matches_bruteforce():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(50, 3))
    b = rng.normal(size=(50, 3))
    d_ab = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    expect = d_ab.min(axis=1).mean() + d_ab.min(axis=0).mean()
    assert chamfer(single_sweep(a), single_sweep(b)) == pytest.approx(expect, abs=1e-9)


def test_chamfer_rejects_empty():
    with pytest.raises(ValueError):
        chamfer(single_sweep(np.zeros((0, 3))), single_sweep(np.zeros((3, 3))))


# ---------------------------------------------------------------------------
# attack_objective


def test_objective_lambda_zero_is_plain_loss():
    tape = ad.Tape()
    loss = tape.leaf(2.5)
    cfg = AttackConfig(regularizer="none")
    out = attack_objective(loss, None, cfg)
    assert out is loss


def test_objective_smoothness_combination():
    tape = ad.Tape()
    loss = tape.leaf(1.0)
    t = tape.param("delta_t", np.array([[0.0, 0, 0], [0.2, 0, 0]]))

    class Holder:
        t_tilde = t
        R_tilde = None

    cfg = AttackConfig(regularizer="smoothness", lambda_s=0.5)
    out = attack_objective(loss, Holder, cfg)
    assert float(out.value) == pytest.approx(1.0 + 0.5 * 0.2)


def test_objective_gradient_additivity():
    # gradient of loss + lambda * S equals gradient of parts combined
    n = 5
    x0 = np.random.default_rng(8).normal(scale=0.05, size=(n, 3))

    def grads(lam):
        tape = ad.Tape()
        t = tape.param("delta_t", x0)

        class Holder:
            t_tilde = t
            R_tilde = None

        loss = ad.asum(ad.mul(t, t))
        cfg = AttackConfig(regularizer="smoothness", lambda_s=lam)
        out = attack_objective(loss, Holder, cfg)
        return ad.backward(tape, out).by_slot["delta_t"]

    g0 = grads(1e-12)  # effectively the loss term alone
    g1 = grads(1.0)
    tape = ad.Tape()
    t = tape.param("delta_t", x0)

    class Holder:
        t_tilde = t
        R_tilde = None

    s = smoothness(Holder)
    gs = ad.backward(tape, s).by_slot["delta_t"]
    assert np.allclose(g1, g0 + gs, atol=1e-9)


def test_objective_requires_sweeps_for_point_regularizers():
    tape = ad.Tape()
    loss = tape.leaf(0.0)
    with pytest.raises(ValueError):
        attack_objective(loss, None, AttackConfig(regularizer="lp", lambda_d=0.1))


# ---------------------------------------------------------------------------
# random_attack


def test_random_zero_sigma():
    delta = random_attack("full", n_steps=10, sigma_t=0.0, sigma_R=0.0, seed=0)
    assert np.array_equal(delta.t_tilde, np.zeros((10, 3)))
    assert np.array_equal(delta.R_tilde, np.zeros((10, 3, 3)))


def test_random_statistics():
    noise = random_attack("points", n_points=100000, sigma_t=0.1, seed=1)
    assert abs(noise.mean()) < 3 * 0.1 / math.sqrt(noise.size)
    assert noise.std() == pytest.approx(0.1, rel=0.02)


def test_random_defaults_and_clipping():
    delta = random_attack("full", n_steps=500, seed=2)
    assert np.max(np.abs(delta.t_tilde)) <= 0.1
    assert np.max(np.abs(delta.R_tilde)) <= 0.01
    # sigma defaults are 0.1 m / 0.01: a meaningful share of entries clips
    assert np.mean(np.abs(delta.t_tilde) == 0.1) > 0.1


def test_random_deterministic_per_seed():
    a = random_attack("translation", n_steps=20, seed=9)
    b = random_attack("translation", n_steps=20, seed=9)
    assert np.array_equal(a.t_tilde, b.t_tilde)


def test_random_mode_masking():
    t_only = random_attack("translation", n_steps=10, seed=3)
    assert np.array_equal(t_only.R_tilde, np.zeros((10, 3, 3)))
    r_only = random_attack("rotation", n_steps=10, seed=3)
    assert np.array_equal(r_only.t_tilde, np.zeros((10, 3)))


# ---------------------------------------------------------------------------
# pgd_attack


def test_pgd_zero_gradient_stays_zero():
    distorted, track, boxes, det = toy_scene()
    cfg = AttackConfig(mode="full", iters=3)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        delta, trace = pgd_attack(distorted, track, [], cfg, det)
    assert np.array_equal(delta.t_tilde, np.zeros((track.n_steps, 3)))
    assert np.array_equal(delta.R_tilde, np.zeros((track.n_steps, 3, 3)))
    assert len(trace.objective) == 4


def test_pgd_budget_invariant_every_iteration():
    distorted, track, boxes, det = toy_scene(seed=10)
    # run manually, checking the projected iterate each step
    for iters in (1, 2, 5):
        cfg = AttackConfig(mode="full", iters=iters, eps_t=0.1, eps_R=0.01)
        delta, _ = pgd_attack(distorted, track, boxes, cfg, det)
        assert np.max(np.abs(delta.t_tilde)) <= 0.1 + 1e-15
        assert np.max(np.abs(delta.R_tilde)) <= 0.01 + 1e-15


def test_pgd_mode_masking_bitwise():
    distorted, track, boxes, det = toy_scene(seed=11)
    t_only, _ = pgd_attack(distorted, track, boxes, AttackConfig(mode="translation", iters=4), det)
    assert np.array_equal(t_only.R_tilde, np.zeros((track.n_steps, 3, 3)))
    assert np.any(t_only.t_tilde != 0.0)
    r_only, _ = pgd_attack(distorted, track, boxes, AttackConfig(mode="rotation", iters=4), det)
    assert np.array_equal(r_only.t_tilde, np.zeros((track.n_steps, 3)))
    assert np.any(r_only.R_tilde != 0.0)


def test_pgd_deterministic():
    distorted, track, boxes, det = toy_scene(seed=12)
    cfg = AttackConfig(mode="full", iters=5)
    d1, t1 = pgd_attack(distorted, track, boxes, cfg, det)
    d2, t2 = pgd_attack(distorted, track, boxes, cfg, det)
    assert np.array_equal(d1.t_tilde, d2.t_tilde)
    assert np.array_equal(d1.R_tilde, d2.R_tilde)
    assert t1.objective == t2.objective


def test_pgd_descends_objective_on_most_scenes():
    wins = 0
    trials = 50
    for seed in range(trials):
        distorted, track, boxes, det = toy_scene(seed=seed, n_steps=6, n_boxes=1, pts_per_box=45)
        cfg = AttackConfig(mode="full", iters=5, branch="classification")
        _, trace = pgd_attack(distorted, track, boxes, cfg, det)
        if trace.detector[-1] <= trace.detector[0]:
            wins += 1
    assert wins >= 0.9 * trials


def test_pgd_rejects_polynomial_mode():
    distorted, track, boxes, det = toy_scene()
    with pytest.raises(ValueError):
        pgd_attack(distorted, track, boxes, AttackConfig(mode="polynomial"), det)


# ---------------------------------------------------------------------------
# pgd_poly_attack


def test_poly_attack_zero_gradient():
    distorted, track, boxes, det = toy_scene()
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        delta, _ = pgd_poly_attack(distorted, track, [], AttackConfig(mode="polynomial", iters=3), det)
    assert np.array_equal(delta.beta, np.zeros((4, 3)))
    assert np.array_equal(delta.t_tilde, np.zeros((track.n_steps, 3)))


def test_poly_attack_respects_induced_budget():
    distorted, track, boxes, det = toy_scene(seed=13)
    cfg = AttackConfig(mode="polynomial", iters=6, eps_t=0.1)
    delta, _ = pgd_poly_attack(distorted, track, boxes, cfg, det)
    assert np.max(np.abs(delta.t_tilde)) <= 0.1 + 1e-12
    assert np.allclose(delta.t_tilde, poly_eval(delta.beta, track.n_steps))


def test_poly_smoother_than_discrete():
    smoother = 0
    trials = 10
    for seed in range(trials):
        distorted, track, boxes, det = toy_scene(seed=100 + seed, n_steps=12)
        d_poly, _ = pgd_poly_attack(distorted, track, boxes,
                                    AttackConfig(mode="polynomial", iters=8), det)
        d_disc, _ = pgd_attack(distorted, track, boxes,
                               AttackConfig(mode="translation", iters=8), det)
        if smoothness(d_poly) <= smoothness(d_disc):
            smoother += 1
    assert smoother >= trials // 2 + 1  # median over trials


# ---------------------------------------------------------------------------
# coordinate_attack


def test_coordinate_attack_zero_iterations():
    distorted, track, boxes, det = toy_scene(seed=14)
    clean = compensate(distorted, track)
    out = coordinate_attack(clean, boxes, 0.1, AttackConfig(iters=0), det)
    assert np.array_equal(out, clean.point_values())


def test_coordinate_attack_clip_bound():
    distorted, track, boxes, det = toy_scene(seed=15)
    clean = compensate(distorted, track)
    out = coordinate_attack(clean, boxes, 0.1, AttackConfig(iters=5), det)
    # the offset clip is exact; the realized difference carries one ulp of
    # the absolute coordinate
    assert np.max(np.abs(out - clean.point_values())) <= 0.1 + 1e-12


def test_coordinate_attack_beats_random_point_noise():
    from trajattack.metrics import average_precision

    stronger = 0
    trials = 10
    for seed in range(trials):
        distorted, track, boxes, det = toy_scene(seed=200 + seed, n_boxes=2, pts_per_box=80)
        det_detect = DetectorConfig(min_z=-10.0, count_fraction=0.0, count_threshold=25.0,
                                    min_cluster_points=5)
        clean = compensate(distorted, track)
        attacked = coordinate_attack(clean, boxes, 0.1,
                                     AttackConfig(iters=10, branch="classification"), det)
        noise = random_attack("points", n_points=clean.m, sigma_t=0.1, seed=seed)
        noisy = clean.point_values() + noise
        ap_atk = average_precision(detect(single_sweep(attacked), det_detect), boxes, 0.7)
        ap_rnd = average_precision(detect(single_sweep(noisy), det_detect), boxes, 0.7)
        if ap_atk <= ap_rnd:
            stronger += 1
    assert stronger >= 0.8 * trials


# ---------------------------------------------------------------------------
# config validation


def test_attack_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(eps_t=0.0)
    with pytest.raises(ValueError):
        AttackConfig(iters=-1)
    with pytest.raises(ValueError):
        AttackConfig(branch="both")
    with pytest.raises(ValueError):
        AttackConfig(mode="scale")
    with pytest.raises(ValueError):
        AttackConfig(regularizer="l0")
    with pytest.raises(ValueError):
        AttackConfig(p=0.5)
    assert AttackConfig(iters=0).iters == 0
