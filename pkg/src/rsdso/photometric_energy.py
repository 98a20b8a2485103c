"""Photometric residuals, robust weighting and the velocity prior."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import lie_groups as lie
from .camera_model import CameraIntrinsics, bilinear, project, unproject
from .rs_projection import KeyframeState, WarpResult

# DSO's 8-pixel "spread" pattern.
PATTERN = np.array(
    [[0, 0], [-2, 0], [2, 0], [0, -2], [0, 2], [-1, -1], [1, -1], [-1, 1]], dtype=float
)

DEFAULT_HUBER = 9.0
DEFAULT_GRAD_C = 50.0


class OutOfBoundsError(ValueError):
    pass


class ImageLevel:
    """Grayscale image with central-difference gradients, sampled bilinearly."""

    def __init__(self, intensity: np.ndarray):
        self.intensity = np.ascontiguousarray(intensity, dtype=float)
        self.height, self.width = self.intensity.shape
        gx = np.zeros_like(self.intensity)
        gy = np.zeros_like(self.intensity)
        gx[:, 1:-1] = 0.5 * (self.intensity[:, 2:] - self.intensity[:, :-2])
        gy[1:-1, :] = 0.5 * (self.intensity[2:, :] - self.intensity[:-2, :])
        self.gx = gx
        self.gy = gy
        self._stack = np.stack([self.intensity, gx, gy], axis=-1).reshape(-1, 3)

    def inside(self, px: np.ndarray, margin: float = 1.0) -> np.ndarray:
        px = np.asarray(px, dtype=float)
        return (
            (px[..., 0] >= margin)
            & (px[..., 0] <= self.width - 1 - margin)
            & (px[..., 1] >= margin)
            & (px[..., 1] <= self.height - 1 - margin)
        )

    def sample(self, px: np.ndarray):
        """Bilinear value and interpolated gradient; out-of-range pixels are clamped."""
        px = np.asarray(px, dtype=float)
        W, H = self.width, self.height
        x = np.minimum(np.maximum(px[..., 0], 0.0), W - 1.0)
        y = np.minimum(np.maximum(px[..., 1], 0.0), H - 1.0)
        x0 = np.minimum(x.astype(np.intp), W - 2)
        y0 = np.minimum(y.astype(np.intp), H - 2)
        fx = (x - x0)[..., None]
        fy = (y - y0)[..., None]
        i00 = y0 * W + x0
        g = self._stack
        top = g[i00] * (1.0 - fx) + g[i00 + 1] * fx
        bot = g[i00 + W] * (1.0 - fx) + g[i00 + W + 1] * fx
        out = top + fy * (bot - top)
        return out[..., 0], out[..., 1:]

    def downsample(self) -> "ImageLevel":
        h, w = self.height // 2 * 2, self.width // 2 * 2
        I = self.intensity[:h, :w]
        return ImageLevel(0.25 * (I[0::2, 0::2] + I[1::2, 0::2] + I[0::2, 1::2] + I[1::2, 1::2]))


def build_pyramid(image: np.ndarray, levels: int = 4) -> list[ImageLevel]:
    pyr = [ImageLevel(image)]
    for _ in range(levels - 1):
        pyr.append(pyr[-1].downsample())
    return pyr


class AnalyticImage:
    """Sum-of-sinusoids image with exact values and gradients at any position.

    Used wherever a derivative check must not be polluted by interpolation.
    """

    def __init__(self, width, height, freqs, amps, phases, offset=128.0):
        self.width = width
        self.height = height
        self.freqs = np.asarray(freqs, dtype=float).reshape(-1, 2)
        self.amps = np.asarray(amps, dtype=float).ravel()
        self.phases = np.asarray(phases, dtype=float).ravel()
        self.offset = offset

    @classmethod
    def random(cls, rng: np.random.Generator, width=320, height=240, n=6):
        ang = rng.uniform(0, np.pi, n)
        k = 2 * np.pi / rng.uniform(8.0, 40.0, n)
        freqs = np.stack([k * np.cos(ang), k * np.sin(ang)], axis=1)
        return cls(width, height, freqs, rng.uniform(5, 18, n), rng.uniform(0, 2 * np.pi, n))

    def inside(self, px, margin: float = 1.0):
        px = np.asarray(px, dtype=float)
        return (
            (px[..., 0] >= margin)
            & (px[..., 0] <= self.width - 1 - margin)
            & (px[..., 1] >= margin)
            & (px[..., 1] <= self.height - 1 - margin)
        )

    def sample(self, px):
        px = np.asarray(px, dtype=float)
        arg = px[..., None, 0] * self.freqs[:, 0] + px[..., None, 1] * self.freqs[:, 1] + self.phases
        v = self.offset + np.sum(self.amps * np.sin(arg), axis=-1)
        dv = self.amps * np.cos(arg)
        g = np.stack([dv @ self.freqs[:, 0], dv @ self.freqs[:, 1]], axis=-1)
        return v, g


def interpolate(img: ImageLevel, pixel):
    """Value and gradient at ``pixel``; raises if outside ``[1, W-2] x [1, H-2]``."""
    px = np.asarray(pixel, dtype=float)
    if not np.all(img.inside(px)):
        raise OutOfBoundsError(f"pixel {px} out of bounds")
    v, g = img.sample(px)
    return (float(v), g) if np.ndim(v) == 0 else (v, g)


def gradient_weight(grad, c: float = DEFAULT_GRAD_C):
    g2 = np.sum(np.square(np.asarray(grad, dtype=float)), axis=-1)
    return c * c / (c * c + g2)


def huber(r, gamma: float = DEFAULT_HUBER):
    """Huber cost and IRLS weight. Cost is ``r^2/2`` inside the knee."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    r = np.asarray(r, dtype=float)
    a = np.abs(r)
    inner = a <= gamma
    cost = np.where(inner, 0.5 * r * r, gamma * (a - 0.5 * gamma))
    weight = np.where(inner, 1.0, gamma / np.where(inner, 1.0, a))
    if cost.ndim == 0:
        return float(cost), float(weight)
    return cost, weight


@dataclass
class TrackedPoint:
    host_id: int
    host_pixel: np.ndarray
    inverse_depth: float
    weights: np.ndarray = field(default_factory=lambda: np.ones(8))
    host_intensities: np.ndarray = field(default_factory=lambda: np.zeros(8))
    status: str = "active"  # active | marginalized | dropped
    fej_inverse_depth: float | None = None
    id: int = 0
    observations: list = field(default_factory=list)  # target keyframe ids
    depth_prior: float | None = None

    def __post_init__(self):
        self.host_pixel = np.asarray(self.host_pixel, dtype=float).reshape(2)
        self.weights = np.asarray(self.weights, dtype=float).reshape(8)
        if self.status == "active" and not self.inverse_depth > 0:
            raise ValueError("active point needs positive inverse depth")

    @classmethod
    def from_host(cls, host_id, host_image, pixel, inverse_depth, grad_c=DEFAULT_GRAD_C, **kw):
        pk = np.asarray(pixel, dtype=float) + PATTERN
        vals, grads = host_image.sample(pk)
        return cls(
            host_id=host_id,
            host_pixel=pixel,
            inverse_depth=inverse_depth,
            weights=gradient_weight(grads, grad_c),
            host_intensities=vals,
            **kw,
        )

    def set_fej(self):
        if self.fej_inverse_depth is None:
            self.fej_inverse_depth = float(self.inverse_depth)


def warp_pattern(point: TrackedPoint, warp: WarpResult, c: CameraIntrinsics, inverse_depth=None):
    """Pattern pixels warped with the central pixel's relative motion."""
    d = point.inverse_depth if inverse_depth is None else inverse_depth
    Xk = unproject(point.host_pixel + PATTERN, np.full(8, d), c)
    Xt = Xk @ warp.relative_rotation.T + warp.relative_translation
    return project(Xt, c)


def photometric_residual(
    host_img,
    target_img,
    warp: WarpResult,
    point: TrackedPoint,
    host_kf: KeyframeState,
    target_kf: KeyframeState,
    c: CameraIntrinsics,
) -> np.ndarray:
    """Eight residuals ``(I_j[p'_k] - b_j) - exp(a_j - a_i) (I_i[p_k] - b_i)``."""
    pk_t = warp_pattern(point, warp, c)
    if not np.all(target_img.inside(pk_t)):
        raise OutOfBoundsError("pattern leaves the target image")
    It, _ = target_img.sample(pk_t)
    Ih, _ = host_img.sample(point.host_pixel + PATTERN)
    scale = np.exp(target_kf.affine_a - host_kf.affine_a)
    return (It - target_kf.affine_b) - scale * (Ih - host_kf.affine_b)


def point_energy(residuals, weights, gamma: float = DEFAULT_HUBER) -> float:
    cost, _ = huber(np.asarray(residuals, dtype=float), gamma)
    return float(np.sum(np.asarray(weights) * cost))


def total_photometric_energy(keyframes, points, c, rmap, gamma: float = DEFAULT_HUBER):
    """Sum of point energies over every host, hosted point and observing frame.

    Returns the energy and the list of ``(point_id, target_id)`` observations
    that could not be evaluated (they contribute zero).
    """
    from .rs_projection import solve_observation_time

    by_id = {kf.id: kf for kf in keyframes}
    energy = 0.0
    invalid = []
    for host in keyframes:
        for p in points:
            if p.host_id != host.id or p.status != "active":
                continue
            for tid in p.observations:
                target = by_id[tid]
                try:
                    w = solve_observation_time(host, target, p.host_pixel, p.inverse_depth, c, rmap)
                    if not (w.converged and w.in_image):
                        raise OutOfBoundsError
                    r = photometric_residual(host.image, target.image, w, p, host, target, c)
                except (OutOfBoundsError, ValueError):
                    invalid.append((p.id, tid))
                    continue
                energy += point_energy(r, p.weights, gamma)
    return energy, invalid


def velocity_prior(prev_kf: KeyframeState, new_kf: KeyframeState, row_time_delta: float) -> np.ndarray:
    """Per-row twist implied by the motion between two keyframes.

    With world-to-camera poses this is ``log(T_i T_{i-1}^-1) * dt_r / (t_i - t_{i-1})``,
    i.e. the camera-to-world relative motion ``T_i^-1 T_{i-1}`` of the
    original formulation expressed in our convention.
    """
    dt = new_kf.timestamp - prev_kf.timestamp
    if not dt > 0:
        raise ValueError("keyframe timestamps must be strictly increasing")
    rel = new_kf.reference_pose @ lie.inverse(prev_kf.reference_pose)
    return lie.log_se3(rel) * (row_time_delta / dt)


def velocity_prior_energy(keyframes, predecessors: dict, row_time_delta: float) -> float:
    """Sum of squared deviations of velocities from their priors.

    ``predecessors`` maps keyframe id to the id of its predecessor; keyframes
    without one (the first) carry no prior.
    """
    by_id = {kf.id: kf for kf in keyframes}
    total = 0.0
    for kf in keyframes:
        pid = predecessors.get(kf.id)
        if pid is None or pid not in by_id:
            continue
        d = kf.velocity - velocity_prior(by_id[pid], kf, row_time_delta)
        total += float(d @ d)
    return total
