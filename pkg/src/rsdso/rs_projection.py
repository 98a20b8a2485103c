"""Constant-velocity pose model and the rolling shutter warp.

A keyframe's pose while row ``t`` is read out is ``exp(t * v^) @ T0`` where
``T0`` is the world-to-camera pose of the reference row and ``v`` the
velocity twist in units per row.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import lie_groups as lie
from .camera_model import BehindCameraError, CameraIntrinsics, RowTimeMap, unproject

RS_TOL = 1e-6
RS_MAX_ITER = 5


@dataclass
class KeyframeState:
    reference_pose: np.ndarray = field(default_factory=lambda: np.eye(4))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(6))
    affine_a: float = 0.0
    affine_b: float = 0.0
    timestamp: float = 0.0
    id: int = 0
    image: Any = None
    fej_pose: np.ndarray | None = None
    fej_velocity: np.ndarray | None = None
    fej_affine: tuple | None = None

    def __post_init__(self):
        self.reference_pose = np.array(self.reference_pose, dtype=float)
        self.velocity = np.array(self.velocity, dtype=float).reshape(6)
        if not np.all(np.isfinite(self.velocity)):
            raise ValueError("velocity must be finite")

    @property
    def has_fej(self) -> bool:
        return self.fej_pose is not None

    def set_fej(self) -> None:
        """Freeze the current state as first-estimate linearization point (once)."""
        if self.has_fej:
            return
        self.fej_pose = self.reference_pose.copy()
        self.fej_velocity = self.velocity.copy()
        self.fej_affine = (float(self.affine_a), float(self.affine_b))

    def fej_state(self) -> "KeyframeState":
        if not self.has_fej:
            return self
        return KeyframeState(
            self.fej_pose, self.fej_velocity, self.fej_affine[0], self.fej_affine[1],
            self.timestamp, self.id, self.image,
        )


@dataclass
class WarpResult:
    target_pixel: np.ndarray
    observation_time: float
    relative_rotation: np.ndarray
    relative_translation: np.ndarray
    converged: bool
    iterations: int
    in_image: bool = True


def pose_at_time(kf: KeyframeState, t: float) -> np.ndarray:
    return lie.exp_se3(kf.velocity * t) @ kf.reference_pose


def relative_motion(host: KeyframeState, target: KeyframeState, t_host: float, t_target: float):
    """Rotation and translation of ``T_target(t_target) @ T_host(t_host)^-1``."""
    T = pose_at_time(target, t_target) @ lie.inverse(pose_at_time(host, t_host))
    return T[:3, :3], T[:3, 3]


@dataclass
class RsSolution:
    """Batched solution of the rolling shutter constraint."""

    t: np.ndarray  # observation times (rows)
    pixel: np.ndarray  # (N, 2)
    X: np.ndarray  # (N, 3) point in target camera at time t
    dp_dt: np.ndarray  # (N, 2) d pixel / d t at fixed state
    row_grad: np.ndarray  # (N, 2) d f_d,y / d pixel
    converged: np.ndarray
    iterations: np.ndarray
    positive: np.ndarray  # point in front of the camera at every iterate
    inside: np.ndarray


def _project_with_derivative(X, vel, c: CameraIntrinsics):
    z = X[:, 2]
    safe_z = np.where(z > 0, z, 1.0)
    px = np.stack([c.fx * X[:, 0] / safe_z + c.cx, c.fy * X[:, 1] / safe_z + c.cy], axis=1)
    dX = vel[:, :3] + np.cross(vel[:, 3:], X)
    dp = np.stack(
        [
            c.fx * (dX[:, 0] - X[:, 0] / safe_z * dX[:, 2]) / safe_z,
            c.fy * (dX[:, 1] - X[:, 1] / safe_z * dX[:, 2]) / safe_z,
        ],
        axis=1,
    )
    return px, dp, z > 0


def solve_rs_constraint(
    Z: np.ndarray,
    vel: np.ndarray,
    c: CameraIntrinsics,
    rmap: RowTimeMap,
    *,
    tol: float = RS_TOL,
    max_iter: int = RS_MAX_ITER,
    method: str = "newton",
) -> RsSolution:
    """Solve ``t = rowtime(pixel(t))`` for points ``Z`` given in the target's
    reference-row camera frame, moving with per-row twists ``vel``.

    ``method="fixed_point"`` is the plain update ``t <- rowtime(pixel(t))``;
    ``"newton"`` divides that update by ``1 - d rowtime/dt``, which is the
    same fixed point with a much larger convergence radius.
    """
    Z = np.asarray(Z, dtype=float)
    vel = np.asarray(vel, dtype=float)
    n = len(Z)
    t = np.zeros(n)
    X = Z.copy()
    px, dp, positive = _project_with_derivative(X, vel, c)
    rt, g = rmap.lookup(px)
    converged = np.zeros(n, dtype=bool)
    iterations = np.full(n, max_iter, dtype=np.int64)
    for k in range(1, max_iter + 1):
        R = t - rt
        if method == "newton":
            slope = 1.0 - np.einsum("ij,ij->i", g, dp)
            slope = np.where(np.abs(slope) > 1e-3, slope, 1.0)
            t_new = t - R / slope
        else:
            t_new = rt
        t = np.where(converged, t, t_new)
        T = lie.exp_se3_batch(vel * t[:, None])
        X = np.einsum("nij,nj->ni", T[:, :3, :3], Z) + T[:, :3, 3]
        px, dp, pos = _project_with_derivative(X, vel, c)
        positive &= pos
        rt, g = rmap.lookup(px)
        newly = (~converged) & (np.abs(t - rt) < tol)
        iterations[newly] = k
        converged |= newly
        if converged.all():
            break
    inside = rmap.inside(px) & positive
    return RsSolution(t, px, X, dp, g, converged & positive, iterations, positive, inside)


def solve_observation_time(
    host: KeyframeState,
    target: KeyframeState,
    host_pixel,
    inverse_depth: float,
    c: CameraIntrinsics,
    rmap: RowTimeMap,
    *,
    tol: float = RS_TOL,
    max_iter: int = RS_MAX_ITER,
    method: str = "newton",
) -> WarpResult:
    """Warp one host pixel into the target frame under the rolling shutter constraint.

    Raises:
        BehindCameraError: if the point is behind the target camera at any iterate.
    """
    host_pixel = np.asarray(host_pixel, dtype=float)
    t_host, _ = rmap.lookup(host_pixel)
    t_host = float(t_host)
    Xh = unproject(host_pixel, inverse_depth, c)
    M = target.reference_pose @ lie.inverse(pose_at_time(host, t_host))
    Z = M[:3, :3] @ Xh + M[:3, 3]
    sol = solve_rs_constraint(
        Z[None], target.velocity[None], c, rmap, tol=tol, max_iter=max_iter, method=method
    )
    if not sol.positive[0]:
        raise BehindCameraError("point behind target camera")
    ts = float(sol.t[0])
    R, t = relative_motion(host, target, t_host, ts)
    return WarpResult(
        target_pixel=sol.pixel[0],
        observation_time=ts,
        relative_rotation=R,
        relative_translation=t,
        converged=bool(sol.converged[0]),
        iterations=int(sol.iterations[0]),
        in_image=bool(sol.inside[0]),
    )
