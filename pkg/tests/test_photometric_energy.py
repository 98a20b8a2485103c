import numpy as np
import pytest

from rsdso import lie_groups as lie
from rsdso.camera_model import CameraIntrinsics, build_row_time_map, pixel_grid
from rsdso.photometric_energy import (
    PATTERN, AnalyticImage, ImageLevel, OutOfBoundsError, TrackedPoint, build_pyramid, gradient_weight, huber,
    interpolate, photometric_residual, point_energy, velocity_prior,
)
from rsdso.rs_projection import KeyframeState, solve_observation_time


def test_pattern_is_eight_distinct_offsets():
    assert PATTERN.shape == (8, 2)
    assert len({tuple(p) for p in PATTERN}) == 8
    assert tuple(PATTERN[0]) == (0.0, 0.0)


def test_huber_cost_and_weight():
    cost, w = huber(np.array([0.0, 3.0, -20.0]), 9.0)
    assert cost[1] == pytest.approx(4.5)
    assert cost[2] == pytest.approx(9.0 * (20.0 - 4.5))
    assert w[1] == 1.0 and w[2] == pytest.approx(9.0 / 20.0)
    with pytest.raises(ValueError):
        huber(1.0, 0.0)


def test_gradient_weight_decreases_with_gradient():
    w = gradient_weight(np.array([[0.0, 0.0], [50.0, 0.0], [200.0, 0.0]]), 50.0)
    assert w[0] == 1.0 and w[1] == pytest.approx(0.5) and w[2] < w[1]


def test_bilinear_sampling_exact_on_linear_image():
    g = pixel_grid(30, 20)
    img = ImageLevel(3.0 * g[..., 0] - 2.0 * g[..., 1] + 7.0)
    px = np.array([[4.3, 5.7], [10.0, 10.5], [20.25, 3.125]])
    v, grad = img.sample(px)
    assert np.abs(v - (3.0 * px[:, 0] - 2.0 * px[:, 1] + 7.0)).max() < 1e-12
    assert np.abs(grad - [3.0, -2.0]).max() < 1e-12


def test_interpolate_out_of_bounds():
    img = ImageLevel(np.zeros((10, 10)))
    with pytest.raises(OutOfBoundsError):
        interpolate(img, [0.5, 5.0])


def test_pyramid_averages_blocks():
    I = np.arange(64.0).reshape(8, 8)
    pyr = build_pyramid(I, 3)
    assert [p.intensity.shape for p in pyr] == [(8, 8), (4, 4), (2, 2)]
    assert pyr[1].intensity[0, 0] == pytest.approx(np.mean(I[:2, :2]))


def test_analytic_image_gradient():
    img = AnalyticImage.random(np.random.default_rng(0))
    px = np.array([[50.3, 70.1]])
    _, g = img.sample(px)
    eps = 1e-5
    for k in range(2):
        d = np.zeros(2)
        d[k] = eps
        fd = (img.sample(px + d)[0] - img.sample(px - d)[0]) / (2 * eps)
        assert fd[0] == pytest.approx(g[0, k], rel=1e-7)


def test_residual_zero_for_consistent_views():
    c = CameraIntrinsics(250.0, 250.0, 159.5, 119.5, 320, 240, 0.0)
    rmap = build_row_time_map(c)
    img = AnalyticImage.random(np.random.default_rng(1))
    kf = KeyframeState(np.eye(4), np.zeros(6), 0.1, 3.0, image=img)
    p = TrackedPoint.from_host(0, img, [100.0, 80.0], 0.5)
    w = solve_observation_time(kf, kf, p.host_pixel, p.inverse_depth, c, rmap)
    r = photometric_residual(img, img, w, p, kf, kf, c)
    assert np.abs(r).max() < 1e-10
    assert point_energy(r, p.weights) == pytest.approx(0.0)


def test_affine_brightness_model():
    c = CameraIntrinsics(250.0, 250.0, 159.5, 119.5, 320, 240, 0.0)
    rmap = build_row_time_map(c)
    img = AnalyticImage.random(np.random.default_rng(2))
    host = KeyframeState(np.eye(4), np.zeros(6), 0.0, 0.0, image=img)
    target = KeyframeState(np.eye(4), np.zeros(6), 0.2, 5.0, image=img)
    p = TrackedPoint.from_host(0, img, [120.0, 60.0], 0.4)
    w = solve_observation_time(host, target, p.host_pixel, p.inverse_depth, c, rmap)
    r = photometric_residual(img, img, w, p, host, target, c)
    I, _ = img.sample(p.host_pixel + PATTERN)
    assert np.abs(r - ((I - 5.0) - np.exp(0.2) * I)).max() < 1e-9


def test_velocity_prior_recovers_constant_twist():
    xi = np.array([0.03, -0.01, 0.02, 0.01, 0.02, -0.005])
    prev = KeyframeState(np.eye(4), np.zeros(6), timestamp=0.0)
    new = KeyframeState(lie.exp_se3(xi), np.zeros(6), timestamp=0.1)
    assert np.abs(velocity_prior(prev, new, 1e-4) - xi * 1e-4 / 0.1).max() < 1e-15
    with pytest.raises(ValueError):
        velocity_prior(new, prev, 1e-4)


def test_tracked_point_requires_positive_depth():
    with pytest.raises(ValueError):
        TrackedPoint(0, np.zeros(2), 0.0)
