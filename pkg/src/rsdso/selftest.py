"""Numerical self-checks shared by the CLI and the acceptance tests."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import lie_groups as lie
from .camera_model import CameraIntrinsics, build_row_time_map
from .config import Config
from .photometric_energy import AnalyticImage, TrackedPoint
from .rs_projection import KeyframeState, solve_rs_constraint
from .simulator import GroundTruthTrajectory
from .windowed_ba import (
    FRAME_DIM, N_INTR, WindowState, collect_observations, evaluate, marginalize, marginalize_quadratic,
    residual_jacobians, schur_solve, schur_solve_blocks,
)

COLUMN_NAMES = (
    [f"host_pose_{i}" for i in range(6)] + [f"target_pose_{i}" for i in range(6)]
    + [f"host_vel_{i}" for i in range(6)] + [f"target_vel_{i}" for i in range(6)]
    + ["a_host", "b_host", "a_target", "b_target", "idepth", "fx", "fy", "cx", "cy"]
)


def default_camera(row_time_delta: float = 1e-4, distortion=()) -> CameraIntrinsics:
    return CameraIntrinsics(250.0, 250.0, 159.5, 119.5, 320, 240, row_time_delta, distortion)


def jacobian_scene(n_obs: int = 1000, seed: int = 0, rolling: bool = True, n_frames: int = 3,
                   preset: str = "circle", velocity_scale: float = 1.0):
    """Keyframes on a simulator trajectory with analytic images and random points."""
    rng = np.random.default_rng(seed)
    c = default_camera()
    traj = GroundTruthTrajectory.from_preset(preset, 30, 30.0, omega=1.5, amplitude=0.3)
    window = WindowState(c, build_row_time_map(c), rolling_shutter=rolling)
    frame_ids = np.sort(rng.choice(np.arange(1, 28), n_frames, replace=False))
    for fid in frame_ids:
        t = fid / 30.0
        v = traj.twist(t) * c.row_time_delta * velocity_scale if rolling else np.zeros(6)
        kf = KeyframeState(
            traj.pose(t), v, rng.normal(0, 0.1), rng.normal(0, 5), t, int(fid),
            AnalyticImage.random(rng, c.width, c.height),
        )
        window.add_keyframe(kf)
    # points at 2-5 m, observed in every other keyframe
    pts = []
    # over-generate: some observations leave the target image
    while sum(len(p.observations) for p in pts) < 1.6 * n_obs:
        host = window.keyframes[rng.integers(n_frames)]
        px = rng.uniform([20, 20], [c.width - 21, c.height - 21])
        d = 1.0 / rng.uniform(2.0, 5.0)
        p = TrackedPoint.from_host(host.id, host.image, px, d, id=len(pts),
                                   observations=[k.id for k in window.keyframes if k.id != host.id])
        pts.append(p)
    window.points = pts
    # perturb intrinsics away from calibration so their columns are exercised off-nominal
    window.intrinsics = c.params + rng.normal(0, 0.5, 4)
    return window, Config(affine_mode="free")


def _frame_vars(window):
    return [(k.reference_pose.copy(), k.velocity.copy(), k.affine_a, k.affine_b) for k in window.keyframes]


def _set_frame(kf, state):
    kf.reference_pose, kf.velocity, kf.affine_a, kf.affine_b = (
        state[0].copy(), state[1].copy(), state[2], state[3])


@dataclass
class JacobianCheck:
    n_obs: int
    worst: dict = field(default_factory=dict)  # column name -> worst normalized error
    passed: bool = False

    @property
    def max_error(self) -> float:
        return max(self.worst.values()) if self.worst else 0.0


def check_jacobians(n_obs: int = 1000, seed: int = 0, rolling: bool = True, eps: float = 1e-6,
                    rel_tol: float = 1e-4, abs_floor: float = 1e-7) -> JacobianCheck:
    """Compare analytic Jacobian columns with central differences.

    The observation time is re-solved to 1e-14 rows for every perturbed
    state. Errors are reported as ``|J - J_fd| / max(rel_tol |J_fd|, abs_floor)``
    per column and observation, so a value below 1 passes.
    """
    window, cfg = jacobian_scene(n_obs, seed, rolling)
    obs = collect_observations(window)
    tight = dict(rs_tol=1e-14, rs_max_iter=50)
    ev = evaluate(window, obs, cfg, **tight)
    lin = residual_jacobians(window, obs, ev, cfg, exact_pattern=True)
    use = ev.valid & lin.ok
    n = len(obs)
    J_fd = np.zeros((n, 8, 33))
    base = _frame_vars(window)
    vel_step_scale = 1e-2

    def residuals():
        e = evaluate(window, obs, cfg, **tight)
        return e.residuals, e.valid

    def central(apply):
        apply(+eps)
        rp, vp = residuals()
        apply(-eps)
        rm, vm = residuals()
        apply(0.0)
        return (rp - rm) / (2 * eps), vp & vm

    for fi, kf in enumerate(window.keyframes):
        for j in range(FRAME_DIM):
            def apply(h, kf=kf, j=j, fi=fi):
                _set_frame(kf, base[fi])
                if h == 0.0:
                    return
                if j < 6:
                    kf.reference_pose = lie.exp_se3(np.eye(6)[j] * h) @ kf.reference_pose
                elif j < 12:
                    # velocities are per row and act over ~100 rows; shrink the
                    # step so the pixel displacement matches the other columns
                    kf.velocity = kf.velocity + np.eye(6)[j - 6] * h * vel_step_scale
                elif j == 12:
                    kf.affine_a += h
                else:
                    kf.affine_b += h
            if j >= 6 and j < 12 and not rolling:
                continue
            d, ok = central(apply)
            if 6 <= j < 12:
                d = d / vel_step_scale
            use &= ok | ((obs.h != fi) & (obs.t != fi))
            mh, mt = obs.h == fi, obs.t == fi
            if j < 6:
                ch, ct = j, 6 + j
            elif j < 12:
                ch, ct = 12 + j - 6, 18 + j - 6
            else:
                ch, ct = 24 + (j - 12), 26 + (j - 12)
            J_fd[mh, :, ch] = d[mh]
            J_fd[mt, :, ct] = d[mt]
    d0 = np.array([p.inverse_depth for p in window.points])

    def apply_d(h):
        for p, v in zip(window.points, d0):
            p.inverse_depth = v + h
    d, ok = central(apply_d)
    use &= ok
    J_fd[:, :, 28] = d
    c0 = window.intrinsics.copy()
    # intrinsics in pixels: host and target effects largely cancel, so use a
    # larger step to stay clear of round-off
    c_step_scale = 1e2
    for j in range(N_INTR):
        def apply_c(h, j=j):
            window.intrinsics = c0 + np.eye(N_INTR)[j] * h * c_step_scale
        d, ok = central(apply_c)
        use &= ok
        J_fd[:, :, 29 + j] = d / c_step_scale

    out = JacobianCheck(int(use.sum()))
    cols = range(33) if rolling else [i for i in range(33) if not 12 <= i < 24]
    for col in cols:
        Ja = lin.J[use, :, col]
        Jf = J_fd[use, :, col]
        err = np.linalg.norm(Ja - Jf, axis=1)
        scale = np.maximum(rel_tol * np.linalg.norm(Jf, axis=1), abs_floor)
        out.worst[COLUMN_NAMES[col]] = float(np.max(err / scale)) if len(err) else 0.0
    out.passed = out.n_obs >= min(n_obs, 1000) and out.max_error < 1.0
    return out


# -- rolling shutter constraint ------------------------------------------------------------

@dataclass
class RscCheck:
    n: int
    converged_fraction: float
    max_residual: float
    max_oracle_diff: float
    max_iterations: int
    passed: bool


def dense_scan_times(Z, vel, c, rmap, span: float = 400.0, step: float = 0.25):
    """Oracle: scan ``t`` on a grid and refine the sign change of ``t - rowtime(p(t))``
    nearest zero by bisection."""
    ts = np.arange(-span, span + step, step)
    out = np.full(len(Z), np.nan)
    for i in range(len(Z)):
        T = lie.exp_se3_batch(vel[i] * ts[:, None])
        X = np.einsum("nij,j->ni", T[:, :3, :3], Z[i]) + T[:, :3, 3]
        y = c.fy * X[:, 1] / X[:, 2] + c.cy
        x = c.fx * X[:, 0] / X[:, 2] + c.cx
        rt, _ = rmap.lookup(np.stack([x, y], 1))
        f = ts - rt
        s = np.flatnonzero(np.sign(f[:-1]) != np.sign(f[1:]))
        if len(s) == 0:
            continue
        k = s[np.argmin(np.abs(ts[s]))]
        lo, hi = ts[k], ts[k + 1]
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            Tm = lie.exp_se3(vel[i] * mid)
            Xm = Tm[:3, :3] @ Z[i] + Tm[:3, 3]
            fm = mid - rmap.lookup(np.array([c.fx * Xm[0] / Xm[2] + c.cx, c.fy * Xm[1] / Xm[2] + c.cy]))[0]
            Tl = lie.exp_se3(vel[i] * lo)
            Xl = Tl[:3, :3] @ Z[i] + Tl[:3, 3]
            flo = lo - rmap.lookup(np.array([c.fx * Xl[0] / Xl[2] + c.cx, c.fy * Xl[1] / Xl[2] + c.cy]))[0]
            if np.sign(fm) == np.sign(flo):
                lo = mid
            else:
                hi = mid
        out[i] = 0.5 * (lo + hi)
    return out


def _flow_along_path(Z, vel, c, ts):
    """Depth and vertical image flow per row of each point over the times ``ts``."""
    T = lie.exp_se3_batch((vel[:, None, :] * ts[None, :, None]).reshape(-1, 6)).reshape(len(Z), len(ts), 4, 4)
    X = np.einsum("ntij,nj->nti", T[..., :3, :3], Z) + T[..., :3, 3]
    dX = vel[:, None, :3] + np.cross(vel[:, None, 3:], X)
    z = X[..., 2]
    safe = np.where(z > 0, z, 1.0)
    dy = c.fy * (dX[..., 1] - X[..., 1] / safe * dX[..., 2]) / safe
    return z, dy


def random_warps(n: int, seed: int = 0, c: CameraIntrinsics | None = None, max_flow: float = 0.45,
                 contraction: float = 0.9, return_times: bool = False):
    """Random points and per-row twists in the contraction regime.

    The observed pixel is drawn first inside the image and the point is moved
    back to the reference row, so the true observation time is known. The
    vertical flow there is uniform in ``(0, max_flow)`` px/row; samples whose
    flow magnitude reaches ``contraction`` anywhere on ``t in [-height, height]``,
    or that pass behind the camera there, are redrawn.
    """
    rng = np.random.default_rng(seed)
    c = c or default_camera()
    rmap = build_row_time_map(c)
    ts = np.linspace(-c.height, c.height, 97)
    Zs, vels, times = [], [], []
    have = 0
    while have < n:
        m = n - have
        px = rng.uniform([10, 10], [c.width - 11, c.height - 11], (m, 2))
        t_obs, _ = rmap.lookup(px)
        z = rng.uniform(1.0, 6.0, m)
        X = np.stack([(px[:, 0] - c.cx) / c.fx * z, (px[:, 1] - c.cy) / c.fy * z, z], 1)
        vel = np.concatenate([rng.normal(size=(m, 3)) * 1e-3, rng.normal(size=(m, 3)) * 1e-3], 1)
        _, dy0 = _flow_along_path(X, vel, c, np.zeros(1))
        vel *= (rng.uniform(0.0, max_flow, m) / np.maximum(np.abs(dy0[:, 0]), 1e-12))[:, None]
        back = lie.exp_se3_batch(-vel * t_obs[:, None])
        Z = np.einsum("nij,nj->ni", back[:, :3, :3], X) + back[:, :3, 3]
        zs, dy = _flow_along_path(Z, vel, c, ts)
        keep = (zs.min(axis=1) > 0.1) & (np.abs(dy).max(axis=1) < contraction)
        Zs.append(Z[keep])
        vels.append(vel[keep])
        times.append(t_obs[keep])
        have += int(keep.sum())
    out = np.concatenate(Zs)[:n], np.concatenate(vels)[:n], c, rmap
    return out + (np.concatenate(times)[:n],) if return_times else out


def check_rsc(n: int = 10000, seed: int = 0, n_oracle: int = 300) -> RscCheck:
    Z, vel, c, rmap = random_warps(n, seed)
    sol = solve_rs_constraint(Z, vel, c, rmap)
    rt, _ = rmap.lookup(sol.pixel)
    res = np.abs(sol.t - rt)
    ok = sol.converged & (res < 1e-6) & (sol.iterations <= 5)
    m = min(n_oracle, n)
    oracle = dense_scan_times(Z[:m], vel[:m], c, rmap)
    diff = np.abs(oracle - sol.t[:m])
    diff = np.where(np.isnan(diff), np.inf, diff)
    frac = float(ok.mean())
    out = RscCheck(n, frac, float(res[sol.converged].max()), float(diff.max()),
                   int(sol.iterations.max()), False)
    out.passed = frac >= 0.999 and out.max_oracle_diff < 1e-2
    return out


# -- Schur complement ------------------------------------------------------------------------

def random_arrow_system(rng, n_frames: int = 5, n_points: int = 200, damping: float = 1e-3):
    """Random SPD system with 14 variables per frame, 4 intrinsics and diagonal depths."""
    nf = FRAME_DIM * n_frames + N_INTR
    n = nf + n_points
    J = np.zeros((8 * n_points * 3, n))
    r = 0
    for p in range(n_points):
        for _ in range(3):
            cols = np.concatenate([rng.choice(nf, 20, replace=False), [nf + p]])
            J[r:r + 8, cols] = rng.normal(size=(8, len(cols)))
            r += 8
    H = J.T @ J + np.eye(n) * 1e-6
    H[np.diag_indices(n)] *= 1 + damping
    b = rng.normal(size=n)
    return H, b, nf


def check_schur(n_systems: int = 100, seed: int = 0) -> float:
    """Worst relative difference between the Schur step and a dense solve."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_systems):
        H, b, nf = random_arrow_system(rng, int(rng.integers(2, 9)), int(rng.integers(20, 200)),
                                       float(10 ** rng.uniform(-6, 0)))
        x = schur_solve(H, b, nf)
        ref = np.linalg.solve(H, b)
        worst = max(worst, float(np.linalg.norm(x - ref) / np.linalg.norm(ref)))
    return worst


# -- marginalization ---------------------------------------------------------------------------

def marginal_gradient_error(n_keep: int = 12, n_marg: int = 8, seed: int = 0) -> float:
    """Relative gap between the gradient of the marginalized quadratic and the
    full gradient with the marginalized block at its conditional optimum."""
    rng = np.random.default_rng(seed)
    n = n_keep + n_marg
    A = rng.normal(size=(2 * n, n))
    H = A.T @ A + 1e-3 * np.eye(n)
    b = rng.normal(size=n)
    m = rng.choice(n, n_marg, replace=False)
    keep = np.setdiff1d(np.arange(n), m)
    Hn, bn = marginalize_quadratic(H, b, m)
    worst = 0.0
    for _ in range(5):
        xk = rng.normal(size=n_keep)
        # optimum of the marginalized block given xk
        xm = np.linalg.solve(H[np.ix_(m, m)], b[m] - H[np.ix_(m, keep)] @ xk)
        x = np.zeros(n)
        x[keep], x[m] = xk, xm
        g_full = (H @ x - b)[keep]
        g_marg = Hn @ xk - bn
        worst = max(worst, float(np.linalg.norm(g_full - g_marg) / max(np.linalg.norm(g_full), 1e-300)))
    return worst


@dataclass
class SoakResult:
    n_keyframes: int
    min_relative_eigenvalue: float  # min over steps of lambda_min / lambda_max
    max_clamp: float  # largest negative eigenvalue removed by the PSD projection, relative to lambda_max
    passed: bool


def marginalization_soak(n_keyframes: int = 500, seed: int = 0, window_size: int = 7,
                         points_per_keyframe: int = 20, tol: float = 1e-9) -> SoakResult:
    """Slide a window over a long trajectory, marginalizing the oldest keyframe
    each step, and track the spectrum of the marginalization prior."""
    rng = np.random.default_rng(seed)
    c = default_camera()
    fps = 30.0
    traj = GroundTruthTrajectory.from_preset("circle", 3 * n_keyframes + 2, fps)
    window = WindowState(c, build_row_time_map(c), rolling_shutter=True)
    cfg = Config(outlier_factor=1e9, affine_mode="prior", min_obs_marginalize=1)
    image = AnalyticImage.random(rng, c.width, c.height)
    worst_rel, worst_clamp = np.inf, 0.0
    pid = 0
    for k in range(n_keyframes):
        t = 3 * k / fps
        kf = KeyframeState(traj.pose(t), traj.twist(t) * c.row_time_delta, 0.0, 0.0, t, k, image)
        window.add_keyframe(kf, window.keyframes[-1].id if window.keyframes else None)
        # move the state off its first estimate
        kf.reference_pose = lie.exp_se3(rng.normal(0, 1e-3, 6)) @ kf.reference_pose
        kf.velocity = kf.velocity + rng.normal(0, 1e-6, 6)
        for p in window.points:
            p.observations.append(k)
        for _ in range(points_per_keyframe):
            px = rng.uniform([20, 20], [c.width - 21, c.height - 21])
            p = TrackedPoint.from_host(k, image, px, 1.0 / rng.uniform(2.0, 5.0), id=pid,
                                       observations=[f.id for f in window.keyframes if f.id != k])
            p.set_fej()
            p.inverse_depth *= 1.0 + rng.normal(0, 0.01)
            window.points.append(p)
            pid += 1
        if len(window.keyframes) > window_size:
            victim = window.keyframes[0].id
            st = marginalize(window, victim, cfg)
            top = max(st["max_eigenvalue"], 1e-300)
            worst_clamp = max(worst_clamp, -st["min_eigenvalue"] / top)
            w = np.linalg.eigvalsh(window.marg.H)
            worst_rel = min(worst_rel, float(w.min() / top))
    passed = worst_rel >= -tol
    return SoakResult(n_keyframes, worst_rel, worst_clamp, passed)


__all__ = [
    "check_jacobians", "check_rsc", "check_schur", "jacobian_scene", "random_arrow_system",
    "dense_scan_times", "random_warps", "schur_solve_blocks", "marginal_gradient_error",
    "marginalization_soak",
]
