"""Windowed photometric bundle adjustment with rolling shutter.

Variables per keyframe (14): pose increment (6, left-multiplied), velocity
(6), affine brightness a, b. Four pinhole intrinsics are shared, and every
active point carries one inverse depth. The depth block of the normal
equations is diagonal and is eliminated with the Schur complement.

Residual Jacobian column order for one observation (33 columns)::

    host pose 6 | target pose 6 | host vel 6 | target vel 6 |
    a_host b_host a_target b_target | inverse depth | fx fy cx cy
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from . import lie_groups as lie
from .camera_model import CameraIntrinsics, RowTimeMap
from .config import Config
from .photometric_energy import PATTERN, TrackedPoint, huber
from .rs_projection import RS_MAX_ITER, RS_TOL, KeyframeState, solve_rs_constraint

log = logging.getLogger(__name__)

FRAME_DIM = 14
N_INTR = 4
N_COLS = 33
COL_IDEPTH = 28
GRAZING_EPS = 1e-6


class SingularSystemError(np.linalg.LinAlgError):
    pass


class NumericalFailure(RuntimeError):
    pass


# -- state -------------------------------------------------------------------

@dataclass
class MargPrior:
    """Quadratic prior ``E(D) = 0.5 D'HD - b'D`` over the window's frame
    variables followed by the intrinsics. ``D`` is the offset of the current
    state from the first-estimate linearization point."""

    ids: list = field(default_factory=list)
    H: np.ndarray = field(default_factory=lambda: np.zeros((N_INTR, N_INTR)))
    b: np.ndarray = field(default_factory=lambda: np.zeros(N_INTR))

    @property
    def dim(self) -> int:
        return FRAME_DIM * len(self.ids) + N_INTR

    def add_frame(self, kf_id: int) -> None:
        n = FRAME_DIM * len(self.ids)
        H = np.insert(self.H, [n] * FRAME_DIM, 0.0, axis=0)
        self.H = np.insert(H, [n] * FRAME_DIM, 0.0, axis=1)
        self.b = np.insert(self.b, [n] * FRAME_DIM, 0.0)
        self.ids.append(kf_id)

    def energy(self, delta: np.ndarray) -> float:
        return float(0.5 * delta @ self.H @ delta - self.b @ delta)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.H).min()) if self.H.size else 0.0


@dataclass
class WindowState:
    calib: CameraIntrinsics
    rmap: RowTimeMap
    keyframes: list = field(default_factory=list)
    points: list = field(default_factory=list)
    intrinsics: np.ndarray | None = None
    marg: MargPrior = field(default_factory=MargPrior)
    # active velocity-prior terms: keyframe id -> predecessor id
    vel_terms: dict = field(default_factory=dict)
    gauge_id: int | None = None
    rolling_shutter: bool = True
    # velocity-prior Jacobians at first estimates, keyed by (keyframe, predecessor)
    vel_jacobians: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.intrinsics is None:
            self.intrinsics = self.calib.params.copy()

    @property
    def camera(self) -> CameraIntrinsics:
        return self.calib.with_params(self.intrinsics)

    @property
    def n_frame_vars(self) -> int:
        return FRAME_DIM * len(self.keyframes) + N_INTR

    def index_of(self, kf_id: int) -> int:
        for i, kf in enumerate(self.keyframes):
            if kf.id == kf_id:
                return i
        raise KeyError(kf_id)

    def keyframe(self, kf_id: int) -> KeyframeState:
        return self.keyframes[self.index_of(kf_id)]

    def add_keyframe(self, kf: KeyframeState, predecessor: int | None = None) -> None:
        if not self.rolling_shutter:
            kf.velocity = np.zeros(6)
        kf.set_fej()
        self.keyframes.append(kf)
        self.marg.add_frame(kf.id)
        if predecessor is not None and self.rolling_shutter:
            self.vel_terms[kf.id] = predecessor
        if self.gauge_id is None:
            self.gauge_id = kf.id

    def active_points(self) -> list:
        return [p for p in self.points if p.status == "active"]


@dataclass
class GnReport:
    iterations: int = 0
    initial_energy: float = 0.0
    final_energy: float = 0.0
    step_norms: list = field(default_factory=list)
    termination: str = "no-observations"
    accepted_energies: list = field(default_factory=list)


# -- observations ---------------------------------------------------------------

@dataclass
class Observations:
    pt: np.ndarray  # index into the point list handed to collect()
    h: np.ndarray  # host frame index in window
    t: np.ndarray  # target frame index in window
    host_px: np.ndarray
    t_host: np.ndarray
    weights: np.ndarray
    host_I: np.ndarray
    target_ids: np.ndarray
    points: list

    def __len__(self):
        return len(self.pt)


def collect_observations(window: WindowState, points: list | None = None) -> Observations:
    points = window.active_points() if points is None else points
    pos = {kf.id: i for i, kf in enumerate(window.keyframes)}
    pt, h, t, tid = [], [], [], []
    for i, p in enumerate(points):
        hi = pos[p.host_id]
        for target in p.observations:
            ti = pos.get(target)
            if ti is None or ti == hi:
                continue
            pt.append(i)
            h.append(hi)
            t.append(ti)
            tid.append(target)
    pt = np.array(pt, dtype=np.intp)
    host_px = np.array([p.host_pixel for p in points]).reshape(-1, 2)
    t_host_pt = window.rmap.lookup(host_px)[0] if len(points) else np.zeros(0)
    if not window.rolling_shutter:
        t_host_pt = np.zeros_like(t_host_pt)
    weights = np.array([p.weights for p in points]).reshape(-1, 8)
    host_I = np.array([p.host_intensities for p in points]).reshape(-1, 8)
    return Observations(
        pt=pt,
        h=np.array(h, dtype=np.intp),
        t=np.array(t, dtype=np.intp),
        host_px=host_px[pt] if len(pt) else np.zeros((0, 2)),
        t_host=t_host_pt[pt] if len(pt) else np.zeros(0),
        weights=weights[pt] if len(pt) else np.zeros((0, 8)),
        host_I=host_I[pt] if len(pt) else np.zeros((0, 8)),
        target_ids=np.array(tid, dtype=np.int64),
        points=points,
    )


@dataclass
class FrameArrays:
    T0: np.ndarray  # (F, 4, 4)
    v: np.ndarray  # (F, 6)
    a: np.ndarray
    b: np.ndarray

    @classmethod
    def current(cls, window: WindowState):
        kfs = window.keyframes
        return cls(
            np.array([k.reference_pose for k in kfs]).reshape(-1, 4, 4),
            np.array([k.velocity for k in kfs]).reshape(-1, 6),
            np.array([k.affine_a for k in kfs], dtype=float),
            np.array([k.affine_b for k in kfs], dtype=float),
        )

    @classmethod
    def fej(cls, window: WindowState):
        kfs = [k.fej_state() for k in window.keyframes]
        return cls(
            np.array([k.reference_pose for k in kfs]).reshape(-1, 4, 4),
            np.array([k.velocity for k in kfs]).reshape(-1, 6),
            np.array([k.affine_a for k in kfs], dtype=float),
            np.array([k.affine_b for k in kfs], dtype=float),
        )


# -- geometry ----------------------------------------------------------------------

@dataclass
class Geometry:
    Xh: np.ndarray  # (N, 3) host-camera point at host row time
    RB: np.ndarray
    tB: np.ndarray
    RM: np.ndarray
    tM: np.ndarray
    RA: np.ndarray
    tA: np.ndarray
    t_star: np.ndarray
    X: np.ndarray
    pixel: np.ndarray
    dp_dt: np.ndarray
    row_grad: np.ndarray
    ok: np.ndarray  # converged, in front of the camera and inside the image
    iterations: np.ndarray

    @property
    def R_rel(self):
        return self.RA @ self.RM @ self.RB

    @property
    def t_rel(self):
        tMB = np.einsum("nij,nj->ni", self.RM, self.tB) + self.tM
        return np.einsum("nij,nj->ni", self.RA, tMB) + self.tA


def _unproject(px, d, c: CameraIntrinsics):
    ray = np.stack(
        [(px[..., 0] - c.cx) / c.fx, (px[..., 1] - c.cy) / c.fy, np.ones(px.shape[:-1])], axis=-1
    )
    return ray / d[..., None]


def compute_geometry(
    frames: FrameArrays,
    obs: Observations,
    idepth: np.ndarray,
    c: CameraIntrinsics,
    rmap: RowTimeMap,
    rolling_shutter: bool,
    *,
    rs_method: str = "newton",
    rs_tol: float = RS_TOL,
    rs_max_iter: int = RS_MAX_ITER,
) -> Geometry:
    n = len(obs)
    Xh = _unproject(obs.host_px, idepth, c)
    inv = lie.inverse(frames.T0)
    Mtab = np.einsum("tij,hjk->thik", frames.T0, inv)
    M = Mtab[obs.t, obs.h]
    RM, tM = M[:, :3, :3], M[:, :3, 3]
    if rolling_shutter:
        B = lie.exp_se3_batch(-frames.v[obs.h] * obs.t_host[:, None])
        RB, tB = B[:, :3, :3], B[:, :3, 3]
        Y = np.einsum("nij,nj->ni", RB, Xh) + tB
        Z = np.einsum("nij,nj->ni", RM, Y) + tM
        sol = solve_rs_constraint(
            Z, frames.v[obs.t], c, rmap, tol=rs_tol, max_iter=rs_max_iter, method=rs_method
        )
        A = lie.exp_se3_batch(frames.v[obs.t] * sol.t[:, None])
        return Geometry(
            Xh, RB, tB, RM, tM, A[:, :3, :3], A[:, :3, 3], sol.t, sol.X, sol.pixel,
            sol.dp_dt, sol.row_grad, sol.converged & sol.inside, sol.iterations,
        )
    eye = np.broadcast_to(np.eye(3), (n, 3, 3))
    zero = np.zeros((n, 3))
    X = np.einsum("nij,nj->ni", RM, Xh) + tM
    z = X[:, 2]
    safe = np.where(z > 0, z, 1.0)
    px = np.stack([c.fx * X[:, 0] / safe + c.cx, c.fy * X[:, 1] / safe + c.cy], axis=1)
    ok = (z > 0) & rmap.inside(px)
    return Geometry(
        Xh, eye, zero, RM, tM, eye, zero, np.zeros(n), X, px,
        np.zeros((n, 2)), np.zeros((n, 2)), ok, np.zeros(n, dtype=np.int64),
    )


def _dproj(X, c: CameraIntrinsics):
    """Projection and its derivative w.r.t. the camera-frame point."""
    z = X[..., 2]
    zs = np.where(z > 0, z, 1.0)
    xn, yn = X[..., 0] / zs, X[..., 1] / zs
    px = np.stack([c.fx * xn + c.cx, c.fy * yn + c.cy], axis=-1)
    D = np.zeros(X.shape[:-1] + (2, 3))
    D[..., 0, 0] = c.fx / zs
    D[..., 0, 2] = -c.fx * xn / zs
    D[..., 1, 1] = c.fy / zs
    D[..., 1, 2] = -c.fy * yn / zs
    return px, D, xn, yn, z > 0


def geometric_jacobian(
    geom: Geometry,
    frames: FrameArrays,
    obs: Observations,
    idepth: np.ndarray,
    c: CameraIntrinsics,
    rolling_shutter: bool,
    offsets: np.ndarray | None = None,
):
    """Derivative of warped pixel(s) w.r.t. the geometric variables.

    ``offsets`` (K, 2) selects host pixels ``host_px + offset`` warped with the
    central pixel's motion; ``None`` means the central pixel only (K = 1).
    Returns pixels (N, K, 2), Jacobian (N, K, 2, 29) with columns
    ``[host pose, target pose, host vel, target vel, idepth, fx fy cx cy]``,
    and a mask of observations whose shutter derivative is not grazing.
    """
    if offsets is None:
        offsets = np.zeros((1, 2))
    n, K = len(obs), len(offsets)
    hp = obs.host_px[:, None, :] + offsets[None]  # (N, K, 2)
    Xh = _unproject(hp, np.broadcast_to(idepth[:, None], (n, K)), c)
    Y = np.einsum("nij,nkj->nki", geom.RB, Xh) + geom.tB[:, None]
    Z = np.einsum("nij,nkj->nki", geom.RM, Y) + geom.tM[:, None]
    X = np.einsum("nij,nkj->nki", geom.RA, Z) + geom.tA[:, None]
    RAM = geom.RA @ geom.RM
    Rrel = RAM @ geom.RB

    dX = np.zeros((n, K, 3, 29))
    dX[..., 0:6] = -np.einsum("nij,nkjl->nkil", RAM, lie.point_jacobian(Y))
    dX[..., 6:12] = np.einsum("nij,nkjl->nkil", geom.RA, lie.point_jacobian(Z))
    if rolling_shutter:
        th = obs.t_host
        Jh = lie.left_jacobian_se3_batch(-frames.v[obs.h] * th[:, None])
        dX[..., 12:18] = -th[:, None, None, None] * np.einsum(
            "nij,nkjl,nlm->nkim", RAM, lie.point_jacobian(Y), Jh
        )
        ts = geom.t_star
        Jt = lie.left_jacobian_se3_batch(frames.v[obs.t] * ts[:, None])
        dX[..., 18:24] = ts[:, None, None, None] * np.einsum(
            "nkjl,nlm->nkjm", lie.point_jacobian(X), Jt
        )
    dX[..., 24] = np.einsum("nij,nkj->nki", Rrel, -Xh / idepth[:, None, None])
    dXh_dc = np.zeros((n, K, 3, 4))
    dXh_dc[..., 0, 0] = -(hp[..., 0] - c.cx) / (c.fx * c.fx) / idepth[:, None]
    dXh_dc[..., 1, 1] = -(hp[..., 1] - c.cy) / (c.fy * c.fy) / idepth[:, None]
    dXh_dc[..., 0, 2] = -1.0 / (c.fx * idepth[:, None])
    dXh_dc[..., 1, 3] = -1.0 / (c.fy * idepth[:, None])
    dX[..., 25:29] = np.einsum("nij,nkjl->nkil", Rrel, dXh_dc)

    px, D, xn, yn, _ = _dproj(X, c)
    J = np.einsum("nkij,nkjl->nkil", D, dX)
    J[..., 0, 25] += xn
    J[..., 1, 26] += yn
    J[..., 0, 27] += 1.0
    J[..., 1, 28] += 1.0
    ok = np.ones(n, dtype=bool)
    if rolling_shutter:
        vt = frames.v[obs.t]
        dXdt = vt[:, None, :3] + np.cross(vt[:, None, 3:], X)
        dpdt = np.einsum("nkij,nkj->nki", D, dXdt)
        # total derivative through the implicit observation time, using the
        # central pixel's constraint
        if np.allclose(offsets[0], 0.0):
            Jc, dpc = J[:, 0], dpdt[:, 0]
        else:
            _, Jc_full, _ = geometric_jacobian(geom, frames, obs, idepth, c, True, None)
            Jc = Jc_full[:, 0]
            dpc = geom.dp_dt
        g = geom.row_grad
        denom = 1.0 - np.einsum("ni,ni->n", g, dpc)
        ok = np.abs(denom) > GRAZING_EPS
        dt_dd = np.einsum("ni,nil->nl", g, Jc) / np.where(ok, denom, 1.0)[:, None]
        J = J + dpdt[..., :, None] * dt_dd[:, None, None, :]
    return px, J, ok


# -- evaluation ------------------------------------------------------------------------

@dataclass
class Evaluation:
    residuals: np.ndarray  # (N, 8)
    valid: np.ndarray  # (N,)
    energy: np.ndarray  # (N,) robust pattern energy (0 where invalid)
    grad: np.ndarray  # (N, 8, 2) target image gradient at warped pattern
    geom: Geometry
    irls: np.ndarray  # (N, 8) Huber IRLS weights


def evaluate(window: WindowState, obs: Observations, cfg: Config, frames: FrameArrays | None = None,
             idepth: np.ndarray | None = None, c: CameraIntrinsics | None = None,
             rs_tol: float = RS_TOL, rs_max_iter: int = RS_MAX_ITER) -> Evaluation:
    frames = FrameArrays.current(window) if frames is None else frames
    c = window.camera if c is None else c
    if idepth is None:
        idepth = np.array([p.inverse_depth for p in obs.points], dtype=float)[obs.pt]
    n = len(obs)
    geom = compute_geometry(frames, obs, idepth, c, window.rmap, window.rolling_shutter,
                            rs_method=cfg.rs_method, rs_tol=rs_tol, rs_max_iter=rs_max_iter)
    if window.rolling_shutter and cfg.pattern_timing == "per_pixel" and n:
        # each pattern pixel was exposed at its own row and is observed at its own time
        hp = (obs.host_px[:, None, :] + PATTERN[None]).reshape(-1, 2)
        th = window.rmap.lookup(hp)[0]
        rep = np.repeat(np.arange(n), 8)
        sub = replace(obs, h=obs.h[rep], t=obs.t[rep], host_px=hp, t_host=th)
        gk = compute_geometry(frames, sub, idepth[rep], c, window.rmap, True,
                              rs_method=cfg.rs_method, rs_tol=rs_tol, rs_max_iter=rs_max_iter)
        pk = gk.pixel.reshape(n, 8, 2)
        valid = geom.ok & np.all(gk.ok.reshape(n, 8), axis=1)
    else:
        Xk = _unproject(obs.host_px[:, None, :] + PATTERN[None], np.broadcast_to(idepth[:, None], (n, 8)), c)
        Xt = np.einsum("nij,nkj->nki", geom.R_rel, Xk) + geom.t_rel[:, None]
        z = Xt[..., 2]
        zs = np.where(z > 0, z, 1.0)
        pk = np.stack([c.fx * Xt[..., 0] / zs + c.cx, c.fy * Xt[..., 1] / zs + c.cy], axis=-1)
        valid = geom.ok & np.all(z > 0, axis=1)
    It = np.zeros((n, 8))
    grad = np.zeros((n, 8, 2))
    for ti, kf in enumerate(window.keyframes):
        m = obs.t == ti
        if not m.any():
            continue
        img = kf.image
        valid[m] &= np.all(img.inside(pk[m]), axis=1)
        It[m], grad[m] = img.sample(pk[m])
    scale = np.exp(frames.a[obs.t] - frames.a[obs.h])
    r = (It - frames.b[obs.t][:, None]) - scale[:, None] * (obs.host_I - frames.b[obs.h][:, None])
    cost, irls = huber(r, cfg.huber_gamma)
    energy = np.where(valid, np.sum(obs.weights * cost, axis=1), 0.0)
    return Evaluation(np.where(valid[:, None], r, 0.0), valid, energy, grad, geom, irls)


@dataclass
class Linearization:
    J: np.ndarray  # (N, 8, 33)
    ok: np.ndarray


def residual_jacobians(
    window: WindowState, obs: Observations, ev: Evaluation, cfg: Config,
    fej_geo=None, exact_pattern: bool | None = None,
) -> Linearization:
    """Jacobian rows ``J_I * J_geo`` and ``J_photo`` for all observations.

    ``fej_geo`` is a ``(J_geo, ok, J_photo)`` triple precomputed at the
    first-estimate point; otherwise the geometric and photometric parts are
    evaluated at the current state.
    """
    if fej_geo is None:
        fej_geo = geo_photo_jacobians(window, obs, cfg, use_fej=False, exact_pattern=exact_pattern)
    Jg, ok_g, Jphoto = fej_geo
    n = len(obs)
    rows = np.einsum("nki,nkil->nkl", ev.grad, np.broadcast_to(Jg, (n, 8) + Jg.shape[2:]))
    J = np.zeros((n, 8, N_COLS))
    J[..., 0:24] = rows[..., 0:24]
    J[..., 24:28] = Jphoto
    J[..., COL_IDEPTH] = rows[..., 24]
    J[..., 29:33] = rows[..., 25:29]
    return Linearization(J, ok_g)


def geo_photo_jacobians(window: WindowState, obs: Observations, cfg: Config, use_fej: bool,
                        exact_pattern: bool | None = None):
    """Geometric Jacobian (N, K, 2, 29) and photometric Jacobian (N, 8, 4)."""
    if exact_pattern is None:
        exact_pattern = not cfg.approx_pattern_jacobian
    if use_fej:
        frames = FrameArrays.fej(window)
        pts = obs.points
        idepth = np.array(
            [p.fej_inverse_depth if p.fej_inverse_depth is not None else p.inverse_depth for p in pts],
            dtype=float,
        )[obs.pt]
        c = window.calib
    else:
        frames = FrameArrays.current(window)
        idepth = np.array([p.inverse_depth for p in obs.points], dtype=float)[obs.pt]
        c = window.camera
    geom = compute_geometry(frames, obs, idepth, c, window.rmap, window.rolling_shutter,
                            rs_method=cfg.rs_method)
    offsets = PATTERN if exact_pattern else None
    _, Jg, ok = geometric_jacobian(geom, frames, obs, idepth, c, window.rolling_shutter, offsets)
    scale = np.exp(frames.a[obs.t] - frames.a[obs.h])
    hI = obs.host_I - frames.b[obs.h][:, None]
    Jp = np.zeros((len(obs), 8, 4))
    Jp[..., 0] = scale[:, None] * hI
    Jp[..., 1] = scale[:, None]
    Jp[..., 2] = -scale[:, None] * hI
    Jp[..., 3] = -1.0
    return Jg, ok & geom.ok, Jp


def residual_jacobian(window: WindowState, point: TrackedPoint, target_id: int, cfg: Config,
                      exact_pattern: bool = True):
    """Residuals (8,) and Jacobian (8, 33) of one observation at the current state."""
    saved = point.observations
    point.observations = [target_id]
    try:
        obs = collect_observations(window, [point])
    finally:
        point.observations = saved
    ev = evaluate(window, obs, cfg)
    lin = residual_jacobians(window, obs, ev, cfg, exact_pattern=exact_pattern)
    if not (ev.valid[0] and lin.ok[0]):
        raise ValueError("observation is not valid at the current state")
    return ev.residuals[0], lin.J[0]


# -- normal equations -------------------------------------------------------------------

def _global_columns(h: np.ndarray, t: np.ndarray, n_frames: int) -> np.ndarray:
    """Global frame-variable index of the 32 non-depth Jacobian columns."""
    hb = FRAME_DIM * h[:, None]
    tb = FRAME_DIM * t[:, None]
    r6 = np.arange(6)
    ib = FRAME_DIM * n_frames
    return np.concatenate(
        [
            hb + r6, tb + r6, hb + 6 + r6, tb + 6 + r6,
            hb + 12, hb + 13, tb + 12, tb + 13,
            np.broadcast_to(ib + np.arange(4), (len(h), 4)),
        ],
        axis=1,
    )


@dataclass
class NormalEquations:
    Hff: np.ndarray
    Hfd: np.ndarray
    hdd: np.ndarray
    bf: np.ndarray
    bd: np.ndarray

    def dense(self):
        nf, nd = self.Hfd.shape
        H = np.zeros((nf + nd, nf + nd))
        H[:nf, :nf] = self.Hff
        H[:nf, nf:] = self.Hfd
        H[nf:, :nf] = self.Hfd.T
        H[nf:, nf:] = np.diag(self.hdd)
        return H, np.concatenate([self.bf, self.bd])


def accumulate_photometric(J, r, W, obs: Observations, n_frames: int, n_points: int) -> NormalEquations:
    nf = FRAME_DIM * n_frames + N_INTR
    Hff = np.zeros((nf, nf))
    bf = np.zeros(nf)
    Hfd = np.zeros((nf, n_points))
    if len(obs) == 0:
        return NormalEquations(Hff, Hfd, np.zeros(n_points), bf, np.zeros(n_points))
    Jf = np.delete(J, COL_IDEPTH, axis=2)
    Jd = J[..., COL_IDEPTH]
    Wr = W * r
    cols = _global_columns(obs.h, obs.t, n_frames)
    pair = obs.h * n_frames + obs.t
    order = np.argsort(pair, kind="stable")
    bounds = np.flatnonzero(np.diff(pair[order])) + 1
    for grp in np.split(order, bounds):
        A = Jf[grp].reshape(-1, Jf.shape[2])
        w = W[grp].ravel()
        idx = cols[grp[0]]
        Hff[np.ix_(idx, idx)] += A.T @ (A * w[:, None])
        np.add.at(bf, idx, -(A.T @ Wr[grp].ravel()))
    hfd = np.einsum("nk,nkc->nc", W * Jd, Jf)
    np.add.at(Hfd, (cols, np.broadcast_to(obs.pt[:, None], cols.shape)), hfd)
    hdd = np.bincount(obs.pt, np.sum(W * Jd * Jd, axis=1), minlength=n_points)
    bd = -np.bincount(obs.pt, np.sum(Jd * Wr, axis=1), minlength=n_points)
    return NormalEquations(Hff, Hfd, hdd, bf, bd)


def frame_delta(window: WindowState) -> np.ndarray:
    """Offset of the current frame variables and intrinsics from their first estimates."""
    out = np.zeros(window.n_frame_vars)
    for i, kf in enumerate(window.keyframes):
        o = FRAME_DIM * i
        out[o:o + 6] = lie.log_se3(kf.reference_pose @ lie.inverse(kf.fej_pose))
        out[o + 6:o + 12] = kf.velocity - kf.fej_velocity
        out[o + 12] = kf.affine_a - kf.fej_affine[0]
        out[o + 13] = kf.affine_b - kf.fej_affine[1]
    out[-N_INTR:] = window.intrinsics - window.calib.params
    return out


def velocity_prior_residual(kf: KeyframeState, pred: KeyframeState, dt_r: float, at_fej: bool = False):
    """Residual ``v_i - v_prior`` and Jacobians w.r.t. (pose_i, vel_i, pose_pred)."""
    dt = kf.timestamp - pred.timestamp
    s = dt_r / dt
    if at_fej:
        Ti, Tp, v = kf.fej_pose, pred.fej_pose, kf.fej_velocity
    else:
        Ti, Tp, v = kf.reference_pose, pred.reference_pose, kf.velocity
    xi = lie.log_se3(Ti @ lie.inverse(Tp))
    r = v - s * xi
    Jl_inv = np.linalg.inv(lie.left_jacobian_se3(xi))
    Jr_inv = np.linalg.inv(lie.left_jacobian_se3(-xi))
    return r, -s * Jl_inv, np.eye(6), s * Jr_inv


def _velocity_prior_jacobian(window: WindowState, kf: KeyframeState, pred: KeyframeState) -> np.ndarray:
    key = (kf.id, pred.id)
    J = window.vel_jacobians.get(key)
    if J is None:
        _, Jpi, Jvi, Jpp = velocity_prior_residual(kf, pred, window.calib.row_time_delta, at_fej=True)
        J = window.vel_jacobians[key] = np.hstack([Jpi, Jvi, Jpp])
    return J


def prior_terms(window: WindowState, cfg: Config, hessian: bool = True):
    """Quadratic prior terms as (energy, H, b) over the frame variables.
    Jacobians at first estimates, residuals at the current state. With
    ``hessian=False`` only the energy is computed (H and b are None)."""
    nf = window.n_frame_vars
    H = np.zeros((nf, nf)) if hessian else None
    b = np.zeros(nf) if hessian else None
    E = 0.0
    pos = {kf.id: i for i, kf in enumerate(window.keyframes)}
    dt_r = window.calib.row_time_delta
    if window.rolling_shutter and cfg.lambda_vel > 0:
        for kid, pid in window.vel_terms.items():
            if kid not in pos or pid not in pos:
                continue
            i, j = pos[kid], pos[pid]
            kf, pred = window.keyframes[i], window.keyframes[j]
            r = kf.velocity - dt_r / (kf.timestamp - pred.timestamp) * lie.log_se3(
                kf.reference_pose @ lie.inverse(pred.reference_pose))
            lam = cfg.lambda_vel
            E += lam * float(r @ r)
            if not hessian:
                continue
            Jt = _velocity_prior_jacobian(window, kf, pred)
            idx = np.concatenate([FRAME_DIM * i + np.arange(6), FRAME_DIM * i + 6 + np.arange(6),
                                  FRAME_DIM * j + np.arange(6)])
            H[np.ix_(idx, idx)] += 2 * lam * Jt.T @ Jt
            b[idx] -= 2 * lam * Jt.T @ r
    if window.gauge_id is not None and window.gauge_id in pos and cfg.gauge_pose_prior > 0:
        i = pos[window.gauge_id]
        kf = window.keyframes[i]
        r = lie.log_se3(kf.reference_pose @ lie.inverse(kf.fej_pose))
        w = cfg.gauge_pose_prior
        sl = slice(FRAME_DIM * i, FRAME_DIM * i + 6)
        E += w * float(r @ r)
        if hessian:
            H[sl, sl] += 2 * w * np.eye(6)
            b[sl] -= 2 * w * r
    if cfg.affine_mode == "prior":
        for i, kf in enumerate(window.keyframes):
            o = FRAME_DIM * i
            E += cfg.affine_prior_a * kf.affine_a**2 + cfg.affine_prior_b * kf.affine_b**2
            if not hessian:
                continue
            H[o + 12, o + 12] += 2 * cfg.affine_prior_a
            H[o + 13, o + 13] += 2 * cfg.affine_prior_b
            b[o + 12] -= 2 * cfg.affine_prior_a * kf.affine_a
            b[o + 13] -= 2 * cfg.affine_prior_b * kf.affine_b
    if cfg.optimize_intrinsics and cfg.intrinsics_prior > 0:
        r = window.intrinsics - window.calib.params
        w = cfg.intrinsics_prior
        E += w * float(r @ r)
        if hessian:
            H[-N_INTR:, -N_INTR:] += 2 * w * np.eye(N_INTR)
            b[-N_INTR:] -= 2 * w * r
    # marginalization prior
    delta = frame_delta(window)
    E += window.marg.energy(delta)
    if not hessian:
        return E, None, None
    H += window.marg.H
    b += window.marg.b - window.marg.H @ delta
    return E, H, b


def depth_prior_terms(points: list, cfg: Config):
    d = np.array([p.inverse_depth for p in points], dtype=float)
    prior = np.array([np.nan if p.depth_prior is None else p.depth_prior for p in points], dtype=float)
    has = ~np.isnan(prior)
    w = cfg.gauge_depth_prior
    r = np.where(has, d - np.nan_to_num(prior), 0.0)
    E = float(w * np.sum(r * r))
    return E, np.where(has, 2 * w, 0.0), -2 * w * r


def active_frame_mask(window: WindowState, cfg: Config) -> np.ndarray:
    mask = np.ones(window.n_frame_vars, dtype=bool)
    for i in range(len(window.keyframes)):
        o = FRAME_DIM * i
        if not window.rolling_shutter:
            mask[o + 6:o + 12] = False
        if cfg.affine_mode == "fixed":
            mask[o + 12:o + 14] = False
    if not cfg.optimize_intrinsics:
        mask[-N_INTR:] = False
    return mask


def build_normal_equations(window: WindowState, cfg: Config, obs: Observations | None = None,
                           ev: Evaluation | None = None, lin: Linearization | None = None,
                           inlier: np.ndarray | None = None):
    """Full system (H, b) over [frame variables, intrinsics, inverse depths]."""
    ne, _ = _normal_equations(window, cfg, obs, ev, lin, inlier)
    return ne.dense()


def _normal_equations(window, cfg, obs=None, ev=None, lin=None, inlier=None):
    obs = collect_observations(window) if obs is None else obs
    ev = evaluate(window, obs, cfg) if ev is None else ev
    if lin is None:
        lin = residual_jacobians(window, obs, ev, cfg)
    use = ev.valid & lin.ok
    if inlier is not None:
        use &= inlier
    W = np.where(use[:, None], obs.weights * ev.irls, 0.0)
    ne = accumulate_photometric(lin.J, ev.residuals, W, obs, len(window.keyframes), len(obs.points))
    E_p, H_p, b_p = prior_terms(window, cfg)
    ne.Hff += H_p
    ne.bf += b_p
    E_d, h_d, b_d = depth_prior_terms(obs.points, cfg)
    ne.hdd += h_d
    ne.bd += b_d
    return ne, E_p + E_d


# -- solver --------------------------------------------------------------------------------

def _spd_solve(S: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    d = np.diag(S)
    if np.any(~(d > 0)):
        raise SingularSystemError("non-positive diagonal in reduced system")
    s = 1.0 / np.sqrt(d)
    Ss = S * s[:, None] * s[None, :]
    try:
        cf = scipy.linalg.cho_factor(Ss, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularSystemError(str(exc)) from exc
    if np.min(np.abs(np.diag(cf[0]))) < 1e-10:
        raise SingularSystemError("reduced system is numerically singular")
    return s * scipy.linalg.cho_solve(cf, s * rhs)


def schur_solve_blocks(Hff, Hfd, hdd, bf, bd, lm: float = 0.0):
    """Solve the arrow-structured system by eliminating the diagonal depth block."""
    Hff = Hff + lm * np.diag(np.diag(Hff))
    hdd = hdd * (1.0 + lm)
    if np.any(~(hdd > 0)):
        raise SingularSystemError("non-positive depth diagonal")
    inv = 1.0 / hdd
    S = Hff - (Hfd * inv) @ Hfd.T
    S = 0.5 * (S + S.T)
    rhs = bf - Hfd @ (inv * bd)
    df = _spd_solve(S, rhs)
    dd = inv * (bd - Hfd.T @ df)
    return df, dd


def schur_solve(H: np.ndarray, b: np.ndarray, n_frame_vars: int, lm: float = 0.0) -> np.ndarray:
    """Dense-input wrapper: the trailing block of ``H`` must be diagonal."""
    nf = n_frame_vars
    Hdd = H[nf:, nf:]
    hdd = np.diag(Hdd)
    if np.any(Hdd - np.diag(hdd)):
        raise ValueError("depth block is not diagonal")
    df, dd = schur_solve_blocks(H[:nf, :nf], H[:nf, nf:], hdd, b[:nf], b[nf:], lm)
    return np.concatenate([df, dd])


# -- Gauss-Newton -----------------------------------------------------------------------------

@dataclass
class _Backup:
    poses: list
    vels: list
    affs: list
    idepth: list
    intrinsics: np.ndarray


def _backup(window: WindowState, points) -> _Backup:
    return _Backup(
        [k.reference_pose.copy() for k in window.keyframes],
        [k.velocity.copy() for k in window.keyframes],
        [(k.affine_a, k.affine_b) for k in window.keyframes],
        [p.inverse_depth for p in points],
        window.intrinsics.copy(),
    )


def _restore(window: WindowState, points, bk: _Backup) -> None:
    for k, T, v, (a, b) in zip(window.keyframes, bk.poses, bk.vels, bk.affs):
        k.reference_pose, k.velocity, k.affine_a, k.affine_b = T, v, a, b
    for p, d in zip(points, bk.idepth):
        p.inverse_depth = d
    window.intrinsics = bk.intrinsics


def apply_step(window: WindowState, points, df: np.ndarray, dd: np.ndarray) -> None:
    for i, kf in enumerate(window.keyframes):
        o = FRAME_DIM * i
        kf.reference_pose = lie.normalize(lie.exp_se3(df[o:o + 6]) @ kf.reference_pose)
        if window.rolling_shutter:
            kf.velocity = kf.velocity + df[o + 6:o + 12]
        kf.affine_a += df[o + 12]
        kf.affine_b += df[o + 13]
    window.intrinsics = window.intrinsics + df[-N_INTR:]
    for p, d in zip(points, dd):
        p.inverse_depth = max(p.inverse_depth + d, 1e-6)


def _solve_step(ne: NormalEquations, fmask: np.ndarray, dmask: np.ndarray, lm: float):
    fi = np.flatnonzero(fmask)
    di = np.flatnonzero(dmask)
    df_a, dd_a = schur_solve_blocks(
        ne.Hff[np.ix_(fi, fi)], ne.Hfd[np.ix_(fi, di)], ne.hdd[di], ne.bf[fi], ne.bd[di], lm
    )
    df = np.zeros(len(fmask))
    dd = np.zeros(len(dmask))
    df[fi] = df_a
    dd[di] = dd_a
    return df, dd


def window_energy(window: WindowState, cfg: Config, obs: Observations, inlier: np.ndarray,
                  ev: Evaluation | None = None) -> float:
    """Total energy with a fixed inlier set; inliers that turn invalid cost the outlier threshold."""
    ev = evaluate(window, obs, cfg) if ev is None else ev
    e_ph = np.where(ev.valid, ev.energy, cfg.outlier_threshold)
    E = float(np.sum(e_ph[inlier]))
    E += prior_terms(window, cfg, hessian=False)[0]
    E += depth_prior_terms(obs.points, cfg)[0]
    return E


def gauss_newton(window: WindowState, cfg: Config) -> GnReport:
    report = GnReport()
    points = window.active_points()
    obs = collect_observations(window, points)
    fej_geo = geo_photo_jacobians(window, obs, cfg, use_fej=True) if cfg.fej else None
    ev = evaluate(window, obs, cfg)
    lin = residual_jacobians(window, obs, ev, cfg, fej_geo)
    inlier = ev.valid & lin.ok & (ev.energy <= cfg.outlier_threshold)
    E = window_energy(window, cfg, obs, inlier, ev)
    if not np.isfinite(E):
        raise NumericalFailure(f"non-finite initial energy {E}")
    report.initial_energy = report.final_energy = E
    fmask = active_frame_mask(window, cfg)
    lm = cfg.lm_init
    report.termination = "max-iterations"
    for it in range(cfg.max_iterations):
        ne, _ = _normal_equations(window, cfg, obs, ev, lin, inlier)
        dmask = ne.hdd > 0
        accepted = False
        while not accepted:
            try:
                df, dd = _solve_step(ne, fmask & (np.diag(ne.Hff) > 0), dmask, lm)
            except SingularSystemError:
                lm *= cfg.lm_factor
                if lm > cfg.lm_max:
                    break
                continue
            bk = _backup(window, points)
            apply_step(window, points, df, dd)
            ev_new = evaluate(window, obs, cfg)
            E_new = window_energy(window, cfg, obs, inlier, ev_new)
            if not np.isfinite(E_new):
                _restore(window, points, bk)
                raise NumericalFailure(f"non-finite energy {E_new}")
            if E_new <= E:
                accepted = True
                E = E_new
                ev = ev_new
                lm = max(lm / cfg.lm_factor, cfg.lm_min)
            else:
                _restore(window, points, bk)
                lm *= cfg.lm_factor
                if lm > cfg.lm_max:
                    break
        report.iterations = it + 1
        if not accepted:
            report.termination = "damping-limit"
            break
        step = float(np.sqrt(df @ df + dd @ dd))
        report.step_norms.append(step)
        report.accepted_energies.append(E)
        prev = report.accepted_energies[-2] if len(report.accepted_energies) > 1 else report.initial_energy
        if step < cfg.step_tol or prev - E <= cfg.energy_rel_tol * abs(prev):
            report.termination = "converged"
            break
        if fej_geo is None:
            lin = residual_jacobians(window, obs, ev, cfg)
        else:
            lin = residual_jacobians(window, obs, ev, cfg, fej_geo)
    report.final_energy = E
    return report


# -- marginalization ----------------------------------------------------------------------------

def marginalize_quadratic(H: np.ndarray, b: np.ndarray, marg_idx) -> tuple[np.ndarray, np.ndarray]:
    """Schur complement of ``marg_idx`` out of the quadratic ``0.5 x'Hx - b'x``."""
    marg_idx = np.asarray(marg_idx, dtype=np.intp)
    keep = np.setdiff1d(np.arange(len(b)), marg_idx)
    Hkk = H[np.ix_(keep, keep)]
    Hkm = H[np.ix_(keep, marg_idx)]
    Hmm = H[np.ix_(marg_idx, marg_idx)]
    Hmm = 0.5 * (Hmm + Hmm.T)
    w, V = np.linalg.eigh(Hmm)
    tol = max(w.max(initial=0.0), 0.0) * 1e-12
    winv = np.where(w > tol, 1.0 / np.where(w > tol, w, 1.0), 0.0)
    Hmm_inv = (V * winv) @ V.T
    Hn = Hkk - Hkm @ Hmm_inv @ Hkm.T
    bn = b[keep] - Hkm @ Hmm_inv @ b[marg_idx]
    return 0.5 * (Hn + Hn.T), bn


def clamp_psd(H: np.ndarray, return_min: bool = False):
    """Project onto the PSD cone; optionally also return the smallest eigenvalue before clamping."""
    if H.size == 0:
        return (H, 0.0, 0.0) if return_min else H
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    out = (V * np.maximum(w, 0.0)) @ V.T
    return (out, float(w.min()), float(w.max())) if return_min else out


def marginalize(window: WindowState, kf_id: int, cfg: Config) -> dict:
    """Remove keyframe ``kf_id``: marginalize or drop its points, drop other
    points' observations in it, and fold its variables into the prior."""
    k = window.index_of(kf_id)
    nf = window.n_frame_vars
    stats = {"points_marginalized": 0, "points_dropped": 0}

    hosted = [p for p in window.points if p.host_id == kf_id and p.status == "active"]
    if hosted:
        obs = collect_observations(window, hosted)
        fej_geo = geo_photo_jacobians(window, obs, cfg, use_fej=True) if cfg.fej else None
        ev = evaluate(window, obs, cfg)
        lin = residual_jacobians(window, obs, ev, cfg, fej_geo)
        good = ev.valid & lin.ok & (ev.energy <= cfg.outlier_threshold)
        counts = np.bincount(obs.pt[good], minlength=len(hosted))
        keep_pt = counts >= cfg.min_obs_marginalize
        use = good & keep_pt[obs.pt]
        if use.any():
            W = np.where(use[:, None], obs.weights * ev.irls, 0.0)
            ne = accumulate_photometric(lin.J, ev.residuals, W, obs, len(window.keyframes), len(hosted))
            _, h_d, b_d = depth_prior_terms(hosted, cfg)
            ne.hdd += np.where(keep_pt, h_d, 0.0)
            ne.bd += np.where(keep_pt, b_d, 0.0)
            # shift the gradient from the current state to the linearization point
            dF = frame_delta(window)
            dD = np.array([p.inverse_depth - (p.fej_inverse_depth or p.inverse_depth) for p in hosted])
            bf0 = ne.bf + ne.Hff @ dF + ne.Hfd @ dD
            bd0 = ne.bd + ne.Hfd.T @ dF + ne.hdd * dD
            sel = np.flatnonzero(keep_pt & (ne.hdd > 0))
            Hfd = ne.Hfd[:, sel]
            inv = 1.0 / ne.hdd[sel]
            window.marg.H = window.marg.H + ne.Hff - (Hfd * inv) @ Hfd.T
            window.marg.b = window.marg.b + bf0 - Hfd @ (inv * bd0[sel])
        for p, kp in zip(hosted, keep_pt):
            p.status = "marginalized" if kp else "dropped"
            stats["points_marginalized" if kp else "points_dropped"] += 1
    window.points = [p for p in window.points if p.status == "active"]
    for p in window.points:
        if kf_id in p.observations:
            p.observations = [t for t in p.observations if t != kf_id]

    # fold prior terms touching the keyframe into the quadratic
    H = window.marg.H.copy()
    b = window.marg.b.copy()
    pos = {kf.id: i for i, kf in enumerate(window.keyframes)}
    dt_r = window.calib.row_time_delta
    for kid, pid in list(window.vel_terms.items()):
        if kf_id not in (kid, pid):
            continue
        del window.vel_terms[kid]
        if kid not in pos or pid not in pos or not window.rolling_shutter or cfg.lambda_vel <= 0:
            continue
        i, j = pos[kid], pos[pid]
        r0, Jpi, Jvi, Jpp = velocity_prior_residual(window.keyframes[i], window.keyframes[j], dt_r, True)
        idx = np.concatenate([FRAME_DIM * i + np.arange(6), FRAME_DIM * i + 6 + np.arange(6),
                              FRAME_DIM * j + np.arange(6)])
        Jt = np.hstack([Jpi, Jvi, Jpp])
        H[np.ix_(idx, idx)] += 2 * cfg.lambda_vel * Jt.T @ Jt
        b[idx] -= 2 * cfg.lambda_vel * Jt.T @ r0
    o = FRAME_DIM * k
    if window.gauge_id == kf_id:
        if cfg.gauge_pose_prior > 0:
            H[o:o + 6, o:o + 6] += 2 * cfg.gauge_pose_prior * np.eye(6)
        window.gauge_id = None
    if cfg.affine_mode == "prior":
        a0, b0 = window.keyframes[k].fej_affine
        H[o + 12, o + 12] += 2 * cfg.affine_prior_a
        H[o + 13, o + 13] += 2 * cfg.affine_prior_b
        b[o + 12] -= 2 * cfg.affine_prior_a * a0
        b[o + 13] -= 2 * cfg.affine_prior_b * b0
    assert H.shape == (nf, nf)
    Hn, bn = marginalize_quadratic(H, b, np.arange(o, o + FRAME_DIM))
    window.marg.H, stats["min_eigenvalue"], stats["max_eigenvalue"] = clamp_psd(Hn, return_min=True)
    window.marg.b = bn
    window.marg.ids.remove(kf_id)
    window.keyframes.pop(k)
    window.vel_jacobians = {key: J for key, J in window.vel_jacobians.items() if kf_id not in key}
    return stats
