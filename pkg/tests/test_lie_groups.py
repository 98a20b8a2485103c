import numpy as np
import pytest
import scipy.linalg

from rsdso import lie_groups as lie


def random_twist(rng, rot_scale=1.0, trans_scale=1.0):
    return np.concatenate([trans_scale * rng.normal(size=3), rot_scale * rng.normal(size=3)])


def test_exp_matches_matrix_exponential():
    rng = np.random.default_rng(0)
    for _ in range(50):
        xi = random_twist(rng, rot_scale=0.8)
        assert np.abs(lie.exp_se3(xi) - scipy.linalg.expm(lie.hat(xi))).max() < 1e-10


def test_exp_small_angle_branch_matches_expm():
    rng = np.random.default_rng(1)
    for scale in (1e-9, 1e-6, 5e-4, 2e-3):
        xi = random_twist(rng, rot_scale=scale)
        assert np.abs(lie.exp_se3(xi) - scipy.linalg.expm(lie.hat(xi))).max() < 1e-12


def test_log_inverts_exp():
    rng = np.random.default_rng(2)
    for _ in range(50):
        xi = random_twist(rng, rot_scale=0.9)
        if np.linalg.norm(xi[3:]) > 3.0:
            continue
        assert np.abs(lie.log_se3(lie.exp_se3(xi)) - xi).max() < 1e-9


def test_log_near_pi_raises():
    xi = np.array([0.1, 0.0, 0.0, 0.0, 0.0, np.pi - 1e-8])
    with pytest.raises(lie.RotationDegeneracyError):
        lie.log_se3(lie.exp_se3(xi))


def test_hat_vee_round_trip():
    xi = np.arange(1.0, 7.0)
    assert np.array_equal(lie.vee(lie.hat(xi)), xi)


def test_inverse_and_compose():
    rng = np.random.default_rng(3)
    A = lie.exp_se3(random_twist(rng))
    B = lie.exp_se3(random_twist(rng))
    assert np.abs(lie.compose(A, lie.inverse(A)) - np.eye(4)).max() < 1e-12
    assert np.abs(lie.inverse(lie.compose(A, B)) - lie.inverse(B) @ lie.inverse(A)).max() < 1e-12


def test_left_jacobian_first_order():
    rng = np.random.default_rng(4)
    xi = random_twist(rng, rot_scale=0.7)
    d = 1e-7 * rng.normal(size=6)
    lhs = lie.exp_se3(xi + d)
    rhs = lie.exp_se3(lie.left_jacobian_se3(xi) @ d) @ lie.exp_se3(xi)
    assert np.abs(lhs - rhs).max() < 1e-12


def test_point_jacobian_matches_finite_difference():
    rng = np.random.default_rng(5)
    X = rng.normal(size=3)
    J = lie.point_jacobian(X)
    eps = 1e-6
    for k in range(6):
        d = np.zeros(6)
        d[k] = eps
        fd = (lie.exp_se3(d)[:3, :3] @ X + lie.exp_se3(d)[:3, 3]
              - lie.exp_se3(-d)[:3, :3] @ X - lie.exp_se3(-d)[:3, 3]) / (2 * eps)
        assert np.abs(fd - J[:, k]).max() < 1e-8


def test_normalize_projects_to_rigid():
    rng = np.random.default_rng(6)
    T = lie.exp_se3(random_twist(rng))
    noisy = T.copy()
    noisy[:3, :3] += 1e-3 * rng.normal(size=(3, 3))
    out = lie.normalize(noisy)
    assert lie.is_valid_pose(out)
    assert np.abs(out - T).max() < 1e-2
    assert np.abs(lie.normalize(T) - T).max() < 1e-12


def test_sim_transform_inverse_and_compose():
    rng = np.random.default_rng(7)
    R = lie.exp_se3(random_twist(rng))[:3, :3]
    S = lie.SimTransform(2.5, R, rng.normal(size=3))
    p = rng.normal(size=(10, 3))
    assert np.abs(S.inverse().apply(S.apply(p)) - p).max() < 1e-12
    assert np.abs(S.compose(S).apply(p) - S.apply(S.apply(p))).max() < 1e-12
    with pytest.raises(ValueError):
        lie.SimTransform(0.0)
