"""Trajectory files, similarity alignment and absolute trajectory error."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .lie_groups import SimTransform

log = logging.getLogger(__name__)


class TrajectoryFormatError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass
class Trajectory:
    """Timestamped camera-to-world poses."""

    timestamps: np.ndarray
    poses: np.ndarray  # (N, 4, 4)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).ravel()
        self.poses = np.asarray(self.poses, dtype=float).reshape(-1, 4, 4)
        if len(self.timestamps) == 0:
            raise TrajectoryFormatError("empty trajectory")
        if len(self.timestamps) != len(self.poses):
            raise TrajectoryFormatError("timestamp / pose count mismatch")
        if np.any(np.diff(self.timestamps) <= 0):
            raise TrajectoryFormatError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.timestamps)

    @property
    def positions(self) -> np.ndarray:
        return self.poses[:, :3, 3]

    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.positions, axis=0), axis=1)))


def read_tum(path) -> Trajectory:
    stamps, poses = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 8:
            raise TrajectoryFormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise TrajectoryFormatError(f"{path}:{lineno}: {exc}") from exc
        q = np.array(vals[4:8])
        if not np.isfinite(q).all() or np.linalg.norm(q) < 1e-9:
            raise TrajectoryFormatError(f"{path}:{lineno}: invalid quaternion")
        T = np.eye(4)
        T[:3, :3] = Rotation.from_quat(q).as_matrix()
        T[:3, 3] = vals[1:4]
        stamps.append(vals[0])
        poses.append(T)
    return Trajectory(np.array(stamps), np.array(poses))


def write_tum(path, traj: Trajectory) -> None:
    buf = io.StringIO()
    quats = Rotation.from_matrix(traj.poses[:, :3, :3]).as_quat()
    for t, T, q in zip(traj.timestamps, traj.poses, quats):
        vals = [t, *T[:3, 3], *q]
        buf.write(" ".join(repr(float(v)) for v in vals) + "\n")
    Path(path).write_text(buf.getvalue())


def align_sim3(est, gt, with_scale: bool = True) -> SimTransform:
    """Least-squares similarity ``T`` minimizing ``sum |T(est_i) - gt_i|^2`` (Umeyama)."""
    X = np.asarray(est, dtype=float).reshape(-1, 3)
    Y = np.asarray(gt, dtype=float).reshape(-1, 3)
    n = len(X)
    if n < 3 or len(Y) != n:
        raise AlignmentError(f"need at least 3 matched pairs, got {n}")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    var_x = np.sum(Xc * Xc) / n
    for P in (Xc, Yc):
        sv = np.linalg.svd(P, compute_uv=False)
        if sv[1] <= 1e-9 * max(sv[0], 1e-300):
            raise AlignmentError("degenerate (collinear or coincident) point configuration")
    cov = Yc.T @ Xc / n
    U, d, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(d) @ S) / var_x) if with_scale else 1.0
    t = my - s * R @ mx
    return SimTransform(s, R, t)


@dataclass
class AteResult:
    e_ate: float
    alignment: SimTransform
    errors: np.ndarray
    n: int
    matched_timestamps: np.ndarray = field(default_factory=lambda: np.zeros(0))


def associate(est_t: np.ndarray, gt_t: np.ndarray, max_dt: float):
    """Nearest-timestamp pairs ``(i_est, i_gt)``; each gt entry is used at most once."""
    cand = []
    for i, t in enumerate(est_t):
        j = int(np.searchsorted(gt_t, t))
        for k in (j - 1, j):
            if 0 <= k < len(gt_t) and abs(gt_t[k] - t) <= max_dt:
                cand.append((abs(gt_t[k] - t), i, k))
    cand.sort()
    used_e, used_g, pairs = set(), set(), []
    for _, i, k in cand:
        if i in used_e or k in used_g:
            continue
        used_e.add(i)
        used_g.add(k)
        pairs.append((i, k))
    pairs.sort()
    return pairs


def ate_from_points(est, gt, with_scale: bool = True) -> tuple[float, SimTransform, np.ndarray]:
    T = align_sim3(est, gt, with_scale)
    err = np.linalg.norm(T.apply(np.asarray(est, dtype=float)) - gt, axis=1)
    return float(np.sqrt(np.mean(err**2))), T, err


def compute_ate(est: Trajectory, gt: Trajectory, max_dt: float = 0.01, alignment: str = "sim3") -> AteResult:
    """RMS position error after the best similarity (or rigid) alignment.

    If the estimated positions are degenerate (e.g. a static camera), the
    alignment falls back to a pure translation.
    """
    if alignment not in ("sim3", "se3"):
        raise ValueError(f"alignment must be sim3 or se3, got {alignment!r}")
    pairs = associate(est.timestamps, gt.timestamps, max_dt)
    if len(pairs) < 3:
        raise AlignmentError(f"only {len(pairs)} timestamp matches within {max_dt} s")
    ie, ig = np.array(pairs).T
    P, Q = est.positions[ie], gt.positions[ig]
    try:
        e, T, err = ate_from_points(P, Q, alignment == "sim3")
    except AlignmentError:
        t = Q.mean(0) - P.mean(0)
        T = SimTransform(1.0, np.eye(3), t)
        err = np.linalg.norm(P + t - Q, axis=1)
        e = float(np.sqrt(np.mean(err**2)))
        log.info("degenerate estimate; using translation-only alignment")
    return AteResult(e, T, err, len(pairs), est.timestamps[ie])


def cumulative_histogram(errors) -> list[tuple[float, int]]:
    """``(e, #runs with error <= e)`` at every distinct finite error value."""
    e = np.sort(np.asarray(list(errors), dtype=float))
    e = e[np.isfinite(e)]
    if len(e) == 0:
        return []
    vals, counts = np.unique(e, return_counts=True)
    return [(float(v), int(c)) for v, c in zip(vals, np.cumsum(counts))]


def histogram_csv(errors) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "count"])
    for v, c in cumulative_histogram(errors):
        w.writerow([repr(v), c])
    return buf.getvalue()


@dataclass
class RunResult:
    seed: int
    ate: float
    result: AteResult | None = None
    trajectory: Trajectory | None = None
    error: str = ""


def run_batch(dataset, n_runs: int, seeds=None, shutter: str = "rs", config=None, max_dt: float = 0.01,
              runner=None) -> list[RunResult]:
    """Run odometry ``n_runs`` times with different point-selection seeds.

    Failed runs are reported with infinite ATE.
    """
    from .frontend import run_odometry
    from .simulator import Dataset

    if seeds is None:
        seeds = list(range(n_runs))
    seeds = list(seeds)
    if len(seeds) != n_runs:
        raise ValueError(f"{n_runs} runs but {len(seeds)} seeds")
    if n_runs == 0:
        return []
    ds = dataset if isinstance(dataset, Dataset) else Dataset.open(dataset)
    gt = ds.groundtruth()
    runner = run_odometry if runner is None else runner
    out = []
    for seed in seeds:
        try:
            traj = runner(ds, shutter=shutter, seed=seed, config=config)
            res = compute_ate(traj, gt, max_dt)
            out.append(RunResult(seed, res.e_ate, res, traj))
        except Exception as exc:  # noqa: BLE001 - any failure counts as a lost run
            log.warning("run with seed %d failed: %s", seed, exc)
            out.append(RunResult(seed, float("inf"), error=f"{type(exc).__name__}: {exc}"))
    return out
