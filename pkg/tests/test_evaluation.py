import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from rsdso.evaluation import (
    AlignmentError, Trajectory, TrajectoryFormatError, align_sim3, associate, compute_ate, cumulative_histogram,
    histogram_csv, read_tum, run_batch, write_tum,
)
from rsdso.lie_groups import SimTransform


def make_traj(positions, t0=0.0, dt=0.1, rotations=None):
    n = len(positions)
    T = np.tile(np.eye(4), (n, 1, 1))
    T[:, :3, 3] = positions
    if rotations is not None:
        T[:, :3, :3] = rotations
    return Trajectory(t0 + dt * np.arange(n), T)


def random_sim3(rng):
    return SimTransform(float(np.exp(rng.uniform(-1, 1))), Rotation.random(random_state=rng).as_matrix(),
                        rng.normal(size=3) * 3)


def four_point_case():
    """Unit square in z=0 with +-e checkerboard heights on the estimate.

    By symmetry the optimal alignment has no rotation or translation and
    scale s = 0.5 / (0.5 + e^2); every point then has error^2 =
    0.5 (1 - s)^2 + s^2 e^2. For e = 0.1 this is exactly 1/102.
    """
    gt = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    est = gt + np.array([[0, 0, 0.1], [0, 0, -0.1], [0, 0, 0.1], [0, 0, -0.1]])
    return est, gt, 1.0 / np.sqrt(102.0)


def test_four_point_hand_case():
    est, gt, expected = four_point_case()
    res = compute_ate(make_traj(est + [3.0, -2.0, 5.0]), make_traj(gt))
    assert abs(res.e_ate - expected) < 1e-12
    assert res.alignment.scale == pytest.approx(50.0 / 51.0, abs=1e-14)


def test_identity_and_translation():
    rng = np.random.default_rng(0)
    P = rng.normal(size=(20, 3))
    assert compute_ate(make_traj(P), make_traj(P)).e_ate < 1e-12
    assert compute_ate(make_traj(P + [1, 2, 3]), make_traj(P)).e_ate < 1e-12


def test_recovers_random_similarity():
    rng = np.random.default_rng(1)
    for _ in range(20):
        gt = rng.normal(size=(30, 3))
        S = random_sim3(rng)
        est = S.apply(gt)
        A = align_sim3(est, gt)
        assert np.abs(A.apply(est) - gt).max() < 1e-10
        assert A.scale == pytest.approx(1.0 / S.scale, rel=1e-10)
        assert compute_ate(make_traj(est), make_traj(gt)).e_ate < 1e-9


def test_ate_invariant_under_similarity_of_estimate():
    rng = np.random.default_rng(2)
    gt = rng.normal(size=(40, 3))
    est = gt + 0.05 * rng.normal(size=gt.shape)
    e0 = compute_ate(make_traj(est), make_traj(gt)).e_ate
    for _ in range(10):
        e1 = compute_ate(make_traj(random_sim3(rng).apply(est)), make_traj(gt)).e_ate
        assert abs(e1 - e0) < 1e-9 * e0


def test_reflection_gives_proper_rotation():
    rng = np.random.default_rng(3)
    gt = rng.normal(size=(12, 3))
    est = gt * [1, 1, -1]
    A = align_sim3(est, gt)
    assert np.linalg.det(A.rotation) == pytest.approx(1.0)
    # brute force over the two SVD sign choices
    Xc, Yc = est - est.mean(0), gt - gt.mean(0)
    U, d, Vt = np.linalg.svd(Yc.T @ Xc)
    best = np.inf
    for sgn in (1.0, -1.0):
        S = np.diag([1, 1, sgn])
        R = U @ S @ Vt
        if np.linalg.det(R) < 0:
            continue
        s = np.trace(np.diag(d) @ S) / np.sum(Xc * Xc)
        best = min(best, np.sum((s * Xc @ R.T - Yc) ** 2))
    got = np.sum((A.apply(est) - gt) ** 2)
    assert got == pytest.approx(best, rel=1e-10)


def test_degenerate_alignment_errors():
    with pytest.raises(AlignmentError):
        align_sim3(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1, 0, 0])
    with pytest.raises(AlignmentError):
        align_sim3(line, line)


def test_static_estimate_falls_back_to_translation():
    est = np.zeros((5, 3))
    gt = np.full((5, 3), 0.5)
    assert compute_ate(make_traj(est), make_traj(gt)).e_ate == 0.0


def test_association_nearest_and_unique():
    pairs = associate(np.array([0.0, 0.1, 0.104]), np.array([0.0, 0.1, 0.2]), 0.01)
    assert pairs == [(0, 0), (1, 1)]
    with pytest.raises(AlignmentError):
        compute_ate(make_traj(np.zeros((4, 3)), t0=5.0), make_traj(np.zeros((4, 3))))


def test_tum_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    R = Rotation.random(6, random_state=rng).as_matrix()
    tr = make_traj(rng.normal(size=(6, 3)), rotations=R)
    path = tmp_path / "t.txt"
    write_tum(path, tr)
    back = read_tum(path)
    assert np.array_equal(back.timestamps, tr.timestamps)
    assert np.abs(back.poses - tr.poses).max() < 1e-14


@pytest.mark.parametrize("text", ["0 1 2 3 0 0 0\n", "0 1 2 3 0 0 0 x\n", "0 1 2 3 0 0 0 0\n",
                                  "1 0 0 0 0 0 0 1\n0 0 0 0 0 0 0 1\n", "# only a comment\n"])
def test_tum_format_errors(tmp_path, text):
    path = tmp_path / "t.txt"
    path.write_text(text)
    with pytest.raises(TrajectoryFormatError):
        read_tum(path)


def test_cumulative_histogram():
    assert cumulative_histogram([]) == []
    assert cumulative_histogram([0.1]) == [(0.1, 1)]
    rng = np.random.default_rng(5)
    e = list(rng.uniform(size=30)) + [np.inf]
    for v, c in cumulative_histogram(e):
        assert c == sum(x <= v for x in e)
    assert histogram_csv([0.2, 0.1]).splitlines() == ["threshold,count", "0.1,1", "0.2,2"]


def test_run_batch_seeds_and_failures(tmp_path, small_twins):
    gt = read_tum(small_twins[0] / "groundtruth.txt")

    def runner(ds, shutter, seed, config):
        if seed == 1:
            raise RuntimeError("lost")
        return Trajectory(gt.timestamps, gt.poses)

    out = run_batch(small_twins[0], 3, [0, 1, 2], runner=runner)
    assert [r.seed for r in out] == [0, 1, 2]
    assert out[0].ate < 1e-12 and np.isinf(out[1].ate) and "lost" in out[1].error
    assert run_batch(small_twins[0], 0, []) == []
    with pytest.raises(ValueError):
        run_batch(small_twins[0], 2, [0])
