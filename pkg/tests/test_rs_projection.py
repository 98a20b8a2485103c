import numpy as np
import pytest

from rsdso import lie_groups as lie
from rsdso.camera_model import BehindCameraError, CameraIntrinsics, build_row_time_map, unproject
from rsdso.rs_projection import KeyframeState, pose_at_time, relative_motion, solve_observation_time, solve_rs_constraint
from rsdso.selftest import check_rsc, dense_scan_times, random_warps


def make_cam(distortion=()):
    return CameraIntrinsics(300.0, 300.0, 159.5, 119.5, 320, 240, 1e-4, distortion)


def test_zero_velocity_gives_row_time_of_projection():
    c = make_cam()
    rmap = build_row_time_map(c)
    Z = np.array([[0.1, -0.2, 2.0], [0.3, 0.4, 3.0]])
    sol = solve_rs_constraint(Z, np.zeros((2, 6)), c, rmap)
    assert sol.converged.all()
    assert np.abs(sol.t - (300.0 * Z[:, 1] / Z[:, 2] + 119.5 - 120.0)).max() < 1e-9


def test_solution_satisfies_constraint_with_distortion():
    Z, vel, c, rmap = random_warps(500, seed=3, c=make_cam((-0.1, 0.02, 0.0, 0.0)))
    sol = solve_rs_constraint(Z, vel, c, rmap)
    rt, _ = rmap.lookup(sol.pixel)
    assert np.mean(sol.converged) > 0.999
    assert np.abs(sol.t - rt)[sol.converged].max() < 1e-6
    assert sol.iterations.max() <= 5


def test_newton_matches_dense_scan_oracle():
    Z, vel, c, rmap = random_warps(40, seed=4)
    sol = solve_rs_constraint(Z, vel, c, rmap)
    oracle = dense_scan_times(Z, vel, c, rmap)
    assert np.abs(oracle - sol.t).max() < 1e-2


def test_newton_converges_faster_than_fixed_point():
    Z, vel, c, rmap = random_warps(300, seed=5, max_flow=0.9)
    newton = solve_rs_constraint(Z, vel, c, rmap, max_iter=5)
    fixed = solve_rs_constraint(Z, vel, c, rmap, max_iter=5, method="fixed_point")
    assert newton.converged.mean() >= fixed.converged.mean()
    assert newton.converged.mean() > 0.99


def test_pose_at_time_and_relative_motion():
    rng = np.random.default_rng(0)
    T0 = lie.exp_se3(rng.normal(size=6) * 0.3)
    v = rng.normal(size=6) * 1e-3
    kf = KeyframeState(T0, v)
    assert np.abs(pose_at_time(kf, 0.0) - T0).max() < 1e-15
    assert np.abs(pose_at_time(kf, 10.0) - lie.exp_se3(10 * v) @ T0).max() < 1e-14
    R, t = relative_motion(kf, kf, 5.0, 5.0)
    assert np.abs(R - np.eye(3)).max() < 1e-12 and np.abs(t).max() < 1e-12


def test_observation_time_identity_warp():
    c = make_cam()
    rmap = build_row_time_map(c)
    kf = KeyframeState(np.eye(4), np.zeros(6))
    w = solve_observation_time(kf, kf, [100.0, 50.0], 0.5, c, rmap)
    assert w.converged and w.in_image
    assert np.abs(w.target_pixel - [100.0, 50.0]).max() < 1e-9
    assert w.observation_time == pytest.approx(-70.0)


def test_observation_time_consistent_with_explicit_pose():
    c = make_cam()
    rmap = build_row_time_map(c)
    host = KeyframeState(np.eye(4), np.array([1e-4, 0, 0, 0, 2e-5, 0]))
    target = KeyframeState(lie.exp_se3([0.05, 0.01, 0.02, 0.0, 0.01, 0.0]), np.array([0, 2e-4, 0, 1e-5, 0, 0]))
    px, d = np.array([140.0, 90.0]), 0.4
    w = solve_observation_time(host, target, px, d, c, rmap)
    th, _ = rmap.lookup(px)
    X = lie.inverse(pose_at_time(host, float(th))) @ np.append(unproject(px, d, c), 1.0)
    Xt = pose_at_time(target, w.observation_time) @ X
    proj = np.array([300 * Xt[0] / Xt[2] + 159.5, 300 * Xt[1] / Xt[2] + 119.5])
    assert np.abs(proj - w.target_pixel).max() < 1e-6
    assert abs(w.observation_time - (proj[1] - 120.0)) < 1e-6


def test_behind_camera_raises():
    c = make_cam()
    rmap = build_row_time_map(c)
    host = KeyframeState(np.eye(4), np.zeros(6))
    target = KeyframeState(lie.exp_se3([0, 0, -5.0, 0, 0, 0]), np.zeros(6))
    with pytest.raises(BehindCameraError):
        solve_observation_time(host, target, [160.0, 120.0], 0.5, c, rmap)


def test_fej_state_frozen_once():
    kf = KeyframeState(np.eye(4), np.zeros(6))
    kf.set_fej()
    kf.reference_pose = lie.exp_se3(np.full(6, 0.1))
    kf.set_fej()
    assert np.array_equal(kf.fej_state().reference_pose, np.eye(4))


def test_rsc_selftest_small():
    res = check_rsc(n=2000, seed=1, n_oracle=50)
    assert res.passed, res


def test_recovers_known_observation_time():
    Z, vel, c, rmap, t_true = random_warps(2000, seed=6, return_times=True)
    sol = solve_rs_constraint(Z, vel, c, rmap)
    ok = sol.converged
    assert ok.mean() >= 0.999
    assert np.abs(sol.t - t_true)[ok].max() < 1e-4
