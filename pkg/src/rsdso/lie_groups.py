"""SE(3) and Sim(3) helpers on plain numpy arrays.

Poses are 4x4 homogeneous matrices. Twists are 6-vectors ordered
(translational, rotational), so ``xi = (rho, omega)`` and

    hat(xi) = [[skew(omega), rho],
               [0,           0  ]]

All functions with a ``_batch`` suffix take a leading batch dimension.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Below this angle the trigonometric coefficients switch to Taylor series.
_SMALL_ANGLE = 1e-3
# log_se3 refuses rotations this close to pi (axis sign is ambiguous there).
_PI_GUARD = 1e-6


class RotationDegeneracyError(ValueError):
    """Rotation angle too close to pi for a unique logarithm."""


def skew(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def hat(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(xi.shape[:-1] + (4, 4))
    out[..., :3, :3] = skew(xi[..., 3:])
    out[..., :3, 3] = xi[..., :3]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.stack(
        [m[..., 0, 3], m[..., 1, 3], m[..., 2, 3], m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]],
        axis=-1,
    )


def _coefficients(theta: np.ndarray):
    """sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with Taylor fallback."""
    theta = np.asarray(theta, dtype=float)
    small = theta < _SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(t)) / (t * t))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (t - np.sin(t)) / (t * t * t))
    return a, b, c


def so3_exp_batch(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    a, b, _ = _coefficients(theta)
    W = skew(omega)
    W2 = W @ W
    return np.eye(3) + a[..., None, None] * W + b[..., None, None] * W2


def so3_left_jacobian_batch(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    _, b, c = _coefficients(theta)
    W = skew(omega)
    return np.eye(3) + b[..., None, None] * W + c[..., None, None] * (W @ W)


def exp_se3_batch(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    omega = xi[..., 3:]
    theta = np.linalg.norm(omega, axis=-1)
    a, b, c = _coefficients(theta)
    W = skew(omega)
    W2 = W @ W
    R = np.eye(3) + a[..., None, None] * W + b[..., None, None] * W2
    V = np.eye(3) + b[..., None, None] * W + c[..., None, None] * W2
    out = np.zeros(xi.shape[:-1] + (4, 4))
    out[..., :3, :3] = R
    out[..., :3, 3] = np.einsum("...ij,...j->...i", V, xi[..., :3])
    out[..., 3, 3] = 1.0
    return out


def exp_se3(xi) -> np.ndarray:
    """Exponential map se(3) -> SE(3) for a single twist."""
    return exp_se3_batch(np.asarray(xi, dtype=float).reshape(6))


def log_se3(T: np.ndarray) -> np.ndarray:
    """Logarithm SE(3) -> twist.

    Raises:
        RotationDegeneracyError: if the rotation angle is within 1e-6 of pi.
    """
    T = np.asarray(T, dtype=float)
    R = T[:3, :3]
    w_sin = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    cos_t = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    sin_t = np.linalg.norm(w_sin)
    theta = np.arctan2(sin_t, cos_t)
    if np.pi - theta < _PI_GUARD:
        raise RotationDegeneracyError(f"rotation angle {theta!r} too close to pi")
    if theta < _SMALL_ANGLE:
        omega = w_sin * (1.0 + theta * theta / 6.0 + 7.0 * theta**4 / 360.0)
    else:
        omega = w_sin * (theta / sin_t)
    _, b, c = _coefficients(np.linalg.norm(omega))
    W = skew(omega)
    V = np.eye(3) + b * W + c * (W @ W)
    rho = np.linalg.solve(V, T[:3, 3])
    return np.concatenate([rho, omega])


def compose(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.asarray(A, dtype=float) @ np.asarray(B, dtype=float)


def inverse(T: np.ndarray) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    out = np.zeros_like(T)
    Rt = np.swapaxes(T[..., :3, :3], -1, -2)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", Rt, T[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def normalize(T: np.ndarray) -> np.ndarray:
    """Nearest rigid transform: rotation block projected onto SO(3) by SVD."""
    T = np.array(T, dtype=float)
    U, _, Vt = np.linalg.svd(T[..., :3, :3])
    d = np.sign(np.linalg.det(U @ Vt))
    U[..., :, 2] *= d[..., None]
    T[..., :3, :3] = U @ Vt
    T[..., 3, :] = (0.0, 0.0, 0.0, 1.0)
    return T


def left_jacobian_se3_batch(xi: np.ndarray) -> np.ndarray:
    """Left Jacobian of SE(3): exp((xi + d)^) ~= exp((J_l(xi) d)^) exp(xi^)."""
    xi = np.asarray(xi, dtype=float)
    rho, omega = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(omega, axis=-1)
    small = theta < _SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    _, _, c1 = _coefficients(theta)
    c2 = np.where(
        small,
        1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
        (t * t + 2.0 * np.cos(t) - 2.0) / (2.0 * t**4),
    )
    c3 = np.where(
        small,
        1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        (2.0 * t - 3.0 * np.sin(t) + t * np.cos(t)) / (2.0 * t**5),
    )
    W = skew(omega)
    P = skew(rho)
    WP = W @ P
    PW = P @ W
    WPW = WP @ W
    WW = W @ W
    Q = (
        0.5 * P
        + c1[..., None, None] * (WP + PW + WPW)
        + c2[..., None, None] * (WW @ P + P @ WW - 3.0 * WPW)
        + c3[..., None, None] * (WPW @ W + W @ WPW)
    )
    J = so3_left_jacobian_batch(omega)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = J
    out[..., 3:, 3:] = J
    out[..., :3, 3:] = Q
    return out


def left_jacobian_se3(xi) -> np.ndarray:
    return left_jacobian_se3_batch(np.asarray(xi, dtype=float).reshape(6))


def point_jacobian(X: np.ndarray) -> np.ndarray:
    """d(exp(d^) X)/dd at d = 0, i.e. [I, -skew(X)], batched over X."""
    X = np.asarray(X, dtype=float)
    out = np.zeros(X.shape[:-1] + (3, 6))
    out[..., :, :3] = np.eye(3)
    out[..., :, 3:] = -skew(X)
    return out


def is_valid_pose(T: np.ndarray, tol: float = 1e-9) -> bool:
    T = np.asarray(T, dtype=float)
    if T.shape != (4, 4) or not np.all(np.isfinite(T)):
        return False
    R = T[:3, :3]
    return (
        np.allclose(R.T @ R, np.eye(3), atol=tol)
        and abs(np.linalg.det(R) - 1.0) < tol
        and np.allclose(T[3], [0, 0, 0, 1])
    )


@dataclass(frozen=True)
class SimTransform:
    """Similarity transform acting on points as ``s * R @ p + t``."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return self.scale * points @ self.rotation.T + self.translation

    def compose(self, other: "SimTransform") -> "SimTransform":
        """self after other."""
        return SimTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "SimTransform":
        Rt = self.rotation.T
        return SimTransform(1.0 / self.scale, Rt, -(Rt @ self.translation) / self.scale)

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.scale * self.rotation
        out[:3, 3] = self.translation
        return out
