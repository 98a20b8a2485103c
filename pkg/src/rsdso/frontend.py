"""Simplified DSO-style front-end: tracking, keyframes, points and window policy."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import lie_groups as lie
from .camera_model import CameraIntrinsics, RowTimeMap, build_row_time_map, undistort_image
from .config import Config
from .photometric_energy import PATTERN, ImageLevel, TrackedPoint, build_pyramid, huber, velocity_prior
from .rs_projection import KeyframeState, pose_at_time, solve_rs_constraint
from .windowed_ba import (
    WindowState, collect_observations, evaluate, gauss_newton, marginalize, NumericalFailure,
)

log = logging.getLogger(__name__)


class TrackingFailure(RuntimeError):
    pass


# -- coarse tracking -----------------------------------------------------------------------

@dataclass
class TrackingReference:
    """World-frame pattern points with their host intensities and affine state."""

    kf_id: int
    kf_pose: np.ndarray
    points: np.ndarray  # (N, 8, 3)
    intensities: np.ndarray  # (N, 8)
    host_a: np.ndarray  # (N,)
    host_b: np.ndarray
    weights: np.ndarray  # (N, 8)
    level_intensities: list = field(default_factory=list)  # host pattern per pyramid level >= 1

    def __len__(self):
        return len(self.points)

    def intensities_at(self, level: int) -> np.ndarray:
        if level == 0 or level > len(self.level_intensities):
            return self.intensities
        return self.level_intensities[level - 1]


@dataclass
class TrackResult:
    pose: np.ndarray
    affine_a: float
    affine_b: float
    energy: float  # RMS-equivalent robust residual at full resolution
    inlier_fraction: float
    flow: float = 0.0
    translation_flow: float = 0.0
    iterations: int = 0


def reference_from_window(window: WindowState, max_points: int | None = None,
                          rng: np.random.Generator | None = None, pyramids: dict | None = None,
                          levels: int = 1) -> TrackingReference:
    """World-frame pattern points of the window's active points.

    With host ``pyramids``, host intensities are also sampled on every coarser
    level at the same physical location, so coarse levels compare like with like.
    """
    latest = window.keyframes[-1]
    pts = window.active_points()
    if max_points is not None and len(pts) > max_points:
        idx = np.sort((rng or np.random.default_rng(0)).choice(len(pts), max_points, replace=False))
        pts = [pts[i] for i in idx]
    c = window.camera
    by_id = {kf.id: kf for kf in window.keyframes}
    out = np.zeros((len(pts), 8, 3))
    level_I = [np.array([p.host_intensities for p in pts]).reshape(-1, 8) for _ in range(1, levels)]
    for host_id in sorted({p.host_id for p in pts}):
        host = by_id[host_id]
        sel = [i for i, p in enumerate(pts) if p.host_id == host_id]
        px = np.array([pts[i].host_pixel for i in sel])
        d = np.array([pts[i].inverse_depth for i in sel])
        th, _ = window.rmap.lookup(px)
        if not window.rolling_shutter:
            th = np.zeros_like(th)
        hp = px[:, None, :] + PATTERN[None]
        Xc = np.stack([(hp[..., 0] - c.cx) / c.fx, (hp[..., 1] - c.cy) / c.fy, np.ones(hp.shape[:-1])], -1)
        Xc = Xc / d[:, None, None]
        Tinv = lie.inverse(lie.exp_se3_batch(host.velocity * th[:, None]) @ host.reference_pose)
        out[sel] = np.einsum("nij,nkj->nki", Tinv[:, :3, :3], Xc) + Tinv[:, None, :3, 3]
        pyr = pyramids.get(host_id) if pyramids else None
        for lvl in range(1, min(levels, len(pyr)) if pyr else 1):
            s = 0.5**lvl
            level_I[lvl - 1][sel] = pyr[lvl].sample((hp + 0.5) * s - 0.5)[0]
    return TrackingReference(
        latest.id, latest.reference_pose.copy(), out,
        np.array([p.host_intensities for p in pts]).reshape(-1, 8),
        np.array([by_id[p.host_id].affine_a for p in pts]),
        np.array([by_id[p.host_id].affine_b for p in pts]),
        np.array([p.weights for p in pts]).reshape(-1, 8),
        level_I,
    )


def _track_linearize(img: ImageLevel, c: CameraIntrinsics, ref: TrackingReference, T, a, b, gamma,
                     jacobian: bool = True, level: int = 0, rolling=None):
    X = ref.points @ T[:3, :3].T + T[:3, 3]
    solved = np.ones(len(X), dtype=bool)
    if rolling is not None:
        # per-point motion from the reference row to the observation time
        M, solved = rolling
        X = np.einsum("nij,nkj->nki", M[:, :3, :3], X) + M[:, None, :3, 3]
    z = X[..., 2]
    zs = np.where(z > 0, z, 1.0)
    px = np.stack([c.fx * X[..., 0] / zs + c.cx, c.fy * X[..., 1] / zs + c.cy], axis=-1)
    valid = solved & np.all((z > 0) & img.inside(px, 2.0), axis=1)
    I, g = img.sample(px)
    scale = np.exp(a - ref.host_a)[:, None]
    hI = ref.intensities_at(level) - ref.host_b[:, None]
    r = I - b - scale * hI
    cost, w = huber(r, gamma)
    cost = np.where(valid[:, None], cost, 0.0)
    E = float(np.sum(ref.weights * cost))
    if not jacobian:
        return E, valid
    n = len(X)
    J = np.zeros((n, 8, 8))
    gx, gy = g[..., 0], g[..., 1]
    du = gx * c.fx / zs
    dv = gy * c.fy / zs
    dz = -(du * X[..., 0] + dv * X[..., 1]) / zs
    dX = np.stack([du, dv, dz], axis=-1)  # d r / d X
    J[..., 0:3] = dX
    J[..., 3:6] = np.cross(X, dX)  # d r / d omega for X' = X + omega x X
    J[..., 6] = -scale * hI
    J[..., 7] = -1.0
    W = np.where(valid[:, None], ref.weights * w, 0.0)
    Jr = J.reshape(-1, 8)
    Wr = W.ravel()
    H = Jr.T @ (Jr * Wr[:, None])
    bvec = -Jr.T @ (Wr * r.ravel())
    return E, valid, H, bvec


def coarse_track(pyramid, calib: CameraIntrinsics, ref: TrackingReference, init_pose,
                 init_affine=(0.0, 0.0), *, iterations: int = 8, gamma: float = 9.0,
                 estimate_affine: bool = True, max_energy: float | None = None,
                 velocity=None, rmap: RowTimeMap | None = None) -> TrackResult:
    """Direct alignment of a new frame against world-frame reference points.

    Estimates the reference-row pose plus affine brightness, coarse-to-fine
    with Levenberg-Marquardt damping. Without ``velocity`` the whole image
    shares one pose; with a per-row ``velocity`` (and the row-time map) each
    point is projected with the pose at its own observation time.
    """
    if velocity is not None:
        velocity = np.asarray(velocity, dtype=float)
        rmap = rmap if rmap is not None else build_row_time_map(calib)
    rolling = None
    if len(ref) == 0:
        raise TrackingFailure("no reference points")
    T = np.array(init_pose, dtype=float)
    a, b = map(float, init_affine)
    total_it = 0
    free = np.ones(8, dtype=bool)
    if not estimate_affine:
        free[6:] = False
    for lvl in range(len(pyramid) - 1, -1, -1):
        img = pyramid[lvl]
        c = calib.scaled(lvl)
        lam = 1e-3
        if velocity is not None:
            # observation times are re-solved once per level and held fixed
            # within it, so they do not enter the Jacobian
            Z = ref.points[:, 0] @ T[:3, :3].T + T[:3, 3]
            sol = solve_rs_constraint(Z, np.broadcast_to(velocity, (len(Z), 6)), calib, rmap)
            rolling = (lie.exp_se3_batch(velocity[None] * sol.t[:, None]), sol.converged)
        E, valid, H, g = _track_linearize(img, c, ref, T, a, b, gamma, level=lvl, rolling=rolling)
        for _ in range(iterations):
            total_it += 1
            Hd = H[np.ix_(free, free)]
            Hd = Hd + lam * np.diag(np.diag(Hd) + 1e-9)
            try:
                step = np.linalg.solve(Hd, g[free])
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            full = np.zeros(8)
            full[free] = step
            T_new = lie.normalize(lie.exp_se3(full[:6]) @ T)
            a_new, b_new = a + full[6], b + full[7]
            E_new, valid_new, H_new, g_new = _track_linearize(img, c, ref, T_new, a_new, b_new, gamma,
                                                              level=lvl, rolling=rolling)
            if E_new < E and valid_new.sum() >= 0.5 * valid.sum():
                T, a, b = T_new, a_new, b_new
                E, valid, H, g = E_new, valid_new, H_new, g_new
                lam = max(lam * 0.5, 1e-6)
                if np.linalg.norm(full) < 1e-7:
                    break
            else:
                lam *= 4.0
                if lam > 1e4:
                    break
    n_res = 8 * max(int(valid.sum()), 1)
    rms = float(np.sqrt(2.0 * E / n_res))
    frac = float(valid.mean())
    res = TrackResult(T, a, b, rms, frac, iterations=total_it)
    res.flow, res.translation_flow = flow_stats(calib, ref, T)
    if max_energy is not None and (not np.isfinite(rms) or rms > max_energy or frac < 0.2):
        raise TrackingFailure(f"tracking diverged: residual {rms:.2f}, visible {frac:.2f}")
    return res


def flow_stats(c: CameraIntrinsics, ref: TrackingReference, T) -> tuple[float, float]:
    """RMS pixel flow of the central points w.r.t. the reference keyframe, full and translation-only."""
    Xw = ref.points[:, 0]
    Xk = Xw @ ref.kf_pose[:3, :3].T + ref.kf_pose[:3, 3]
    rel = T @ lie.inverse(ref.kf_pose)
    Xn = Xk @ rel[:3, :3].T + rel[:3, 3]
    Xt = Xk + rel[:3, 3]
    ok = (Xk[:, 2] > 0) & (Xn[:, 2] > 0) & (Xt[:, 2] > 0)
    if not ok.any():
        return float("inf"), float("inf")

    def proj(X):
        return np.stack([c.fx * X[:, 0] / X[:, 2] + c.cx, c.fy * X[:, 1] / X[:, 2] + c.cy], axis=1)

    p0 = proj(Xk[ok])
    f = np.sqrt(np.mean(np.sum((proj(Xn[ok]) - p0) ** 2, axis=1)))
    ft = np.sqrt(np.mean(np.sum((proj(Xt[ok]) - p0) ** 2, axis=1)))
    return float(f), float(ft)


def need_new_keyframe(track: TrackResult, stats: dict, cfg: Config) -> bool:
    """Flow, translation-flow and exposure-change heuristic; ``stats`` carries
    ``delta_a`` and ``frames_since_keyframe``."""
    return bool(
        track.flow > cfg.keyframe_flow_threshold
        or track.translation_flow > cfg.keyframe_translation_threshold
        or abs(stats.get("delta_a", 0.0)) > cfg.keyframe_affine_threshold
        or stats.get("frames_since_keyframe", 0) >= cfg.keyframe_max_interval
    )


# -- points ------------------------------------------------------------------------------------

def _score(image: np.ndarray) -> np.ndarray:
    """Sum of absolute differences to the four neighbours (0 on the border)."""
    I = np.asarray(image, dtype=float)
    s = np.zeros_like(I)
    c = I[1:-1, 1:-1]
    s[1:-1, 1:-1] = (
        np.abs(I[:-2, 1:-1] - c) + np.abs(I[2:, 1:-1] - c) + np.abs(I[1:-1, :-2] - c) + np.abs(I[1:-1, 2:] - c)
    )
    return s


def select_candidates(image: np.ndarray, n: int, margin: int = 4, block: int = 32,
                      threshold: float = 6.0) -> np.ndarray:
    """Spread up to ``n`` high-gradient pixels over a regular grid.

    Each grid cell proposes its strongest pixel, which is kept if its score
    exceeds the median score of the surrounding block plus ``threshold``.
    Returns integer pixel coordinates ``(x, y)``.
    """
    I = np.asarray(image, dtype=float)
    H, W = I.shape
    if n <= 0:
        return np.zeros((0, 2), dtype=int)
    score = _score(I)
    nby, nbx = -(-H // block), -(-W // block)
    med = np.zeros((nby, nbx))
    for by in range(nby):
        for bx in range(nbx):
            med[by, bx] = np.median(score[by * block:(by + 1) * block, bx * block:(bx + 1) * block])
    inner_w, inner_h = W - 2 * margin, H - 2 * margin
    cell = max(1, int(np.sqrt(inner_w * inner_h / n)))
    out = []
    for y0 in range(margin, H - margin, cell):
        for x0 in range(margin, W - margin, cell):
            patch = score[y0:min(y0 + cell, H - margin), x0:min(x0 + cell, W - margin)]
            k = int(np.argmax(patch))
            dy, dx = divmod(k, patch.shape[1])
            y, x = y0 + dy, x0 + dx
            if patch[dy, dx] > med[y // block, x // block] + threshold:
                out.append((x, y))
    return np.array(out, dtype=int).reshape(-1, 2)


def smooth_depth(pixels, idepth_map: np.ndarray, radius: int = 3, tol: float = 1e-3) -> np.ndarray:
    """True where the inverse depth around a pixel is defined and free of
    creases or jumps, i.e. the pattern lies on one surface."""
    px = np.asarray(pixels, dtype=int).reshape(-1, 2)
    H, W = idepth_map.shape
    out = np.zeros(len(px), dtype=bool)
    for i, (x, y) in enumerate(px):
        if x < radius or y < radius or x >= W - radius or y >= H - radius:
            continue
        nb = idepth_map[y - radius:y + radius + 1, x - radius:x + radius + 1]
        if not np.all(np.isfinite(nb)) or np.any(nb <= 0):
            continue
        sx = np.abs(nb[:, 2:] + nb[:, :-2] - 2 * nb[:, 1:-1]).max()
        sy = np.abs(nb[2:] + nb[:-2] - 2 * nb[1:-1]).max()
        out[i] = max(sx, sy) <= tol * idepth_map[y, x]
    return out


def initialize_depth(pixels, idepth_map: np.ndarray, noise: float, rng: np.random.Generator):
    """Oracle inverse depth with multiplicative Gaussian noise.

    Returns ``(inverse_depths, ok)``; pixels without ground truth or near a
    depth discontinuity are rejected.
    Non-positive draws are redrawn.
    """
    px = np.asarray(pixels, dtype=int).reshape(-1, 2)
    truth = idepth_map[px[:, 1], px[:, 0]]
    ok = np.isfinite(truth) & (truth > 0) & smooth_depth(px, idepth_map)
    d = truth.copy()
    todo = ok.copy()
    for _ in range(100):
        if not todo.any():
            break
        d[todo] = truth[todo] * (1.0 + noise * rng.standard_normal(int(todo.sum())))
        todo &= ~(d > 0)
    ok &= d > 0
    return np.where(ok, d, 0.0), ok


# -- window policy ---------------------------------------------------------------------------------

def distance_scores(centers: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """DSO-style score per keyframe (the last row is the latest keyframe)."""
    n = len(centers)
    D = np.linalg.norm(centers[:, None] - centers[None], axis=2)
    s = np.full(n, -np.inf)
    for i in range(n - 1):
        others = [j for j in range(n - 1) if j != i]
        s[i] = np.sqrt(D[i, -1]) * np.sum(1.0 / (D[i, others] + eps))
    return s


def choose_marginalization_victims(window: WindowState, visibility: dict, cfg: Config) -> list:
    """Keyframes (never the latest) with too few visible points, then the
    worst-placed one if the window is still too large."""
    kfs = window.keyframes
    victims = [kf.id for kf in kfs[:-1] if visibility.get(kf.id, 1.0) < cfg.visibility_min]
    remaining = [kf for kf in kfs if kf.id not in victims]
    if len(remaining) > cfg.window_size:
        centers = np.array([lie.inverse(kf.reference_pose)[:3, 3] for kf in remaining])
        s = distance_scores(centers)
        victims.append(remaining[int(np.argmax(s))].id)
    return victims


def visibility_in_latest(window: WindowState, cfg: Config, activated: dict) -> dict:
    """Fraction of each keyframe's activated points with a valid observation in the latest keyframe."""
    latest = window.keyframes[-1].id
    pts = [p for p in window.active_points() if latest in p.observations]
    vis = {kf.id: 0 for kf in window.keyframes}
    if pts:
        saved = [p.observations for p in pts]
        for p in pts:
            p.observations = [latest]
        try:
            obs = collect_observations(window, pts)
            ev = evaluate(window, obs, cfg)
        finally:
            for p, s in zip(pts, saved):
                p.observations = s
        for k, ok in zip(obs.pt, ev.valid):
            if ok:
                vis[pts[k].host_id] += 1
    out = {}
    for kf in window.keyframes:
        n = activated.get(kf.id, 0)
        out[kf.id] = vis[kf.id] / n if n else 0.0
    return out


# -- odometry --------------------------------------------------------------------------------------

@dataclass
class OdometryStats:
    frames: int = 0
    keyframes: int = 0
    tracking_failures: int = 0
    gn_iterations: int = 0
    marginalized: int = 0


class Odometry:
    """Runs tracking and windowed optimization over a frame sequence.

    ``mode`` selects the rolling shutter model ("rs") or the global shutter
    baseline ("gs", velocities fixed at zero).
    """

    def __init__(self, calib: CameraIntrinsics, cfg: Config | None = None, mode: str = "rs",
                 seed: int = 0, depth_oracle=None):
        if mode not in ("rs", "gs"):
            raise ValueError(f"mode must be rs or gs, got {mode!r}")
        self.cfg = cfg or Config()
        self.calib = calib
        self.mode = mode
        self.rng = np.random.default_rng(seed)
        self.depth_oracle = depth_oracle
        self.window = WindowState(calib, build_row_time_map(calib), rolling_shutter=(mode == "rs"))
        self.pyramids = {}
        self.ref: TrackingReference | None = None
        self.keyframe_log = {}  # id -> (timestamp, camera-to-world pose)
        self.velocity_log = {}  # id -> latest per-row velocity twist
        self.frame_poses = []  # (timestamp, world-to-camera) of tracked frames
        self.last_affine = (0.0, 0.0)
        self.frames_since_kf = 0
        self.activated = {}
        self.point_counter = 0
        self.stats = OdometryStats()
        self.consecutive_failures = 0

    # -- helpers
    def _prepare(self, image):
        img = undistort_image(image, self.calib) if self.calib.has_distortion else np.asarray(image, float)
        return build_pyramid(img, self.cfg.pyramid_levels)

    def _initial_guesses(self):
        last = self.frame_poses[-1][1]
        guesses = [last]
        if len(self.frame_poses) >= 2:
            prev = self.frame_poses[-2][1]
            guesses.insert(0, lie.normalize((last @ lie.inverse(prev)) @ last))
        return guesses

    def _predicted_velocity(self):
        """Per-row twist for tracking: constant velocity over the last two tracked
        frames, else the newest keyframe's estimate. None in global shutter mode."""
        if self.mode != "rs":
            return None
        if len(self.frame_poses) >= 2:
            (t0, T0), (t1, T1) = self.frame_poses[-2:]
            if t1 > t0:
                return lie.log_se3(T1 @ lie.inverse(T0)) * (self.calib.row_time_delta / (t1 - t0))
        return self.window.keyframes[-1].velocity.copy()

    def _track(self, pyr):
        cfg = self.cfg
        best = None
        vel = self._predicted_velocity()
        for guess in self._initial_guesses():
            try:
                res = coarse_track(
                    pyr, self.calib, self.ref, guess, self.last_affine,
                    iterations=cfg.track_iterations, gamma=cfg.huber_gamma,
                    estimate_affine=cfg.affine_mode != "fixed", max_energy=cfg.track_max_energy,
                    velocity=vel, rmap=self.window.rmap,
                )
            except TrackingFailure as exc:
                log.debug("tracking attempt failed: %s", exc)
                continue
            if best is None or res.energy < best.energy:
                best = res
            if res.energy < 0.5 * cfg.track_max_energy:
                break
        if best is None:
            raise TrackingFailure("all initializations diverged")
        return best

    def _activate_points(self, kf: KeyframeState, idepth_map):
        cfg = self.cfg
        room = cfg.num_active_points - len(self.window.active_points())
        if room <= 0 or idepth_map is None:
            self.activated[kf.id] = 0
            return
        cand = select_candidates(kf.image.intensity, cfg.candidates_per_keyframe)
        if len(cand) == 0:
            self.activated[kf.id] = 0
            return
        order = self.rng.permutation(len(cand))
        cand = cand[order]
        d, ok = initialize_depth(cand, idepth_map, cfg.depth_init_noise, self.rng)
        cand, d = cand[ok][:room], d[ok][:room]
        others = [k.id for k in self.window.keyframes if k.id != kf.id]
        first = self.window.gauge_id == kf.id
        for px, di in zip(cand, d):
            p = TrackedPoint.from_host(
                kf.id, kf.image, px.astype(float), float(di), cfg.grad_weight_c,
                id=self.point_counter, observations=list(others),
            )
            if first:
                p.depth_prior = float(di)
            p.set_fej()
            self.window.points.append(p)
            self.point_counter += 1
        self.activated[kf.id] = len(cand)

    def _prune(self):
        """Remove invalid or outlier observations; drop points left without any."""
        w = self.window
        pts = w.active_points()
        if not pts:
            return
        obs = collect_observations(w, pts)
        if len(obs) == 0:
            return
        ev = evaluate(w, obs, self.cfg)
        bad = ~ev.valid | (ev.energy > self.cfg.outlier_threshold)
        for k in np.flatnonzero(bad):
            p = pts[obs.pt[k]]
            tid = int(obs.target_ids[k])
            if tid in p.observations:
                p.observations.remove(tid)
        newest = w.keyframes[-1].id
        for p in pts:
            if not p.observations and p.host_id != newest:
                p.status = "dropped"
        w.points = [p for p in w.points if p.status == "active"]

    def _log_keyframes(self):
        for kf in self.window.keyframes:
            self.keyframe_log[kf.id] = (kf.timestamp, lie.inverse(kf.reference_pose))
            self.velocity_log[kf.id] = kf.velocity.copy()

    def _make_keyframe(self, index, timestamp, pyr, pose, affine, idepth_map):
        w = self.window
        prev = w.keyframes[-1] if w.keyframes else None
        kf = KeyframeState(pose, np.zeros(6), affine[0], affine[1], timestamp, index, pyr[0])
        if prev is not None and self.mode == "rs":
            kf.velocity = velocity_prior(prev, kf, self.calib.row_time_delta)
        for p in w.active_points():
            p.observations.append(index)
        w.add_keyframe(kf, prev.id if prev is not None else None)
        self.pyramids[index] = pyr
        self._activate_points(kf, idepth_map)
        self.stats.keyframes += 1
        if len(w.keyframes) >= 2:
            rep = gauss_newton(w, self.cfg)
            self.stats.gn_iterations += rep.iterations
            log.debug("kf %d: GN %d it, E %.1f -> %.1f (%s)", index, rep.iterations,
                      rep.initial_energy, rep.final_energy, rep.termination)
            self._prune()
            vis = visibility_in_latest(w, self.cfg, self.activated)
            self._log_keyframes()
            for vid in choose_marginalization_victims(w, vis, self.cfg):
                marginalize(w, vid, self.cfg)
                self.pyramids.pop(vid, None)
                self.stats.marginalized += 1
        self._log_keyframes()
        self.ref = reference_from_window(w, self.cfg.track_points, self.rng, self.pyramids,
                                         self.cfg.pyramid_levels)
        self.frames_since_kf = 0

    # -- main entry
    def process(self, index: int, timestamp: float, image, idepth_map=None) -> None:
        pyr = self._prepare(image)
        self.stats.frames += 1
        if not self.window.keyframes:
            pose = np.eye(4)
            self.frame_poses.append((timestamp, pose))
            self._make_keyframe(index, timestamp, pyr, pose, (0.0, 0.0), idepth_map)
            return
        try:
            res = self._track(pyr)
        except TrackingFailure:
            self.stats.tracking_failures += 1
            self.consecutive_failures += 1
            if self.consecutive_failures > 5:
                raise
            return
        self.consecutive_failures = 0
        self.frame_poses.append((timestamp, res.pose))
        self.last_affine = (res.affine_a, res.affine_b)
        self.frames_since_kf += 1
        latest = self.window.keyframes[-1]
        stats = {"delta_a": res.affine_a - latest.affine_a, "frames_since_keyframe": self.frames_since_kf}
        if need_new_keyframe(res, stats, self.cfg):
            if idepth_map is None and self.depth_oracle is not None:
                idepth_map = self.depth_oracle(index)
            self._make_keyframe(index, timestamp, pyr, res.pose, self.last_affine, idepth_map)

    def trajectory(self):
        from .evaluation import Trajectory

        ids = sorted(self.keyframe_log, key=lambda k: self.keyframe_log[k][0])
        return Trajectory([self.keyframe_log[k][0] for k in ids], [self.keyframe_log[k][1] for k in ids])


def run_odometry(dataset, shutter: str = "rs", seed: int = 0, config: Config | None = None,
                 max_frames: int | None = None, return_state: bool = False):
    """Run the full pipeline on a simulator dataset and return keyframe poses
    (and the :class:`Odometry` object if ``return_state``)."""
    from .simulator import Dataset

    ds = dataset if isinstance(dataset, Dataset) else Dataset.open(dataset)
    odo = Odometry(ds.calib, config, shutter, seed, depth_oracle=ds.inverse_depth)
    n = len(ds) if max_frames is None else min(max_frames, len(ds))
    for i in range(n):
        idm = ds.inverse_depth(i) if i == 0 else None
        odo.process(i, float(ds.times[i]), ds.image(i), idm)
    return (odo.trajectory(), odo) if return_state else odo.trajectory()
