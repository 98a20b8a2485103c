"""Pinhole projection, radial-tangential distortion and the row-time map.

Pixel coordinates follow the usual convention: x to the right, y down,
integer values at pixel centres. Row times are measured in rows relative
to the reference row of the distorted image.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class BehindCameraError(ValueError):
    pass


class DistortionDomainError(ValueError):
    pass


class OutOfImageError(ValueError):
    pass


class CalibrationFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    row_time_delta: float
    distortion: tuple = ()  # () for none, else (k1, k2, p1, p2)
    shutter: str = "rolling"

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")
        if self.row_time_delta < 0:
            raise ValueError("row_time_delta must be non-negative")
        if len(self.distortion) not in (0, 4):
            raise ValueError("radtan distortion needs exactly 4 parameters")
        if self.shutter not in ("rolling", "global"):
            raise ValueError(f"unknown shutter {self.shutter!r}")
        object.__setattr__(self, "distortion", tuple(float(d) for d in self.distortion))

    @property
    def params(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def y0(self) -> float:
        return self.height / 2.0

    @property
    def x0(self) -> float:
        return self.width / 2.0

    @property
    def has_distortion(self) -> bool:
        return bool(self.distortion) and any(d != 0.0 for d in self.distortion)

    @property
    def y0_distorted(self) -> float:
        return float(distort(np.array([self.x0, self.y0]), self)[1])

    def with_params(self, params) -> "CameraIntrinsics":
        fx, fy, cx, cy = (float(p) for p in params)
        return replace(self, fx=fx, fy=fy, cx=cx, cy=cy)

    def scaled(self, level: int) -> "CameraIntrinsics":
        """Intrinsics of pyramid level ``level`` (2x2 averaging per level)."""
        s = 0.5**level
        return replace(
            self,
            fx=self.fx * s,
            fy=self.fy * s,
            cx=(self.cx + 0.5) * s - 0.5,
            cy=(self.cy + 0.5) * s - 0.5,
            width=self.width >> level,
            height=self.height >> level,
            distortion=(),
        )


def project(point3d, c: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame point(s) ``(..., 3)`` to pixels ``(..., 2)``."""
    p = np.asarray(point3d, dtype=float)
    z = p[..., 2]
    if np.any(~(z > 0)):
        raise BehindCameraError("point has non-positive depth")
    return np.stack([c.fx * p[..., 0] / z + c.cx, c.fy * p[..., 1] / z + c.cy], axis=-1)


def unproject(pixel, inverse_depth, c: CameraIntrinsics) -> np.ndarray:
    """Back-project pixel(s) with inverse depth ``1/z`` to camera-frame points."""
    px = np.asarray(pixel, dtype=float)
    d = np.asarray(inverse_depth, dtype=float)
    if np.any(~(d > 0)):
        raise ValueError("inverse depth must be positive")
    ray = np.stack(
        [(px[..., 0] - c.cx) / c.fx, (px[..., 1] - c.cy) / c.fy, np.ones(px.shape[:-1])], axis=-1
    )
    return ray / d[..., None]


def _radtan(xn, yn, k):
    k1, k2, p1, p2 = k
    r2 = xn * xn + yn * yn
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = xn * radial + 2.0 * p1 * xn * yn + p2 * (r2 + 2.0 * xn * xn)
    yd = yn * radial + p1 * (r2 + 2.0 * yn * yn) + 2.0 * p2 * xn * yn
    # Jacobian d(xd, yd)/d(xn, yn)
    dradial = 2.0 * k1 + 4.0 * k2 * r2
    j00 = radial + xn * dradial * xn + 2.0 * p1 * yn + 6.0 * p2 * xn
    j01 = xn * dradial * yn + 2.0 * p1 * xn + 2.0 * p2 * yn
    j10 = yn * dradial * xn + 2.0 * p1 * xn + 2.0 * p2 * yn
    j11 = radial + yn * dradial * yn + 6.0 * p1 * yn + 2.0 * p2 * xn
    return xd, yd, (j00, j01, j10, j11)


def distort(pixel_undistorted, c: CameraIntrinsics, *, check_domain: bool = True) -> np.ndarray:
    """Map undistorted pixel(s) into the original (distorted) image."""
    p = np.asarray(pixel_undistorted, dtype=float)
    if not c.has_distortion:
        return p.copy()
    xn = (p[..., 0] - c.cx) / c.fx
    yn = (p[..., 1] - c.cy) / c.fy
    xd, yd, (j00, j01, j10, j11) = _radtan(xn, yn, c.distortion)
    if check_domain and np.any(j00 * j11 - j01 * j10 <= 0):
        raise DistortionDomainError("pixel outside the invertible region of the distortion model")
    return np.stack([c.fx * xd + c.cx, c.fy * yd + c.cy], axis=-1)


def distort_jacobian(pixel_undistorted, c: CameraIntrinsics) -> np.ndarray:
    """d distort / d pixel, shape ``(..., 2, 2)``."""
    p = np.asarray(pixel_undistorted, dtype=float)
    out = np.zeros(p.shape[:-1] + (2, 2))
    if not c.has_distortion:
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = 1.0
        return out
    xn = (p[..., 0] - c.cx) / c.fx
    yn = (p[..., 1] - c.cy) / c.fy
    _, _, (j00, j01, j10, j11) = _radtan(xn, yn, c.distortion)
    out[..., 0, 0] = j00
    out[..., 0, 1] = j01 * c.fx / c.fy
    out[..., 1, 0] = j10 * c.fy / c.fx
    out[..., 1, 1] = j11
    return out


def undistort(pixel_distorted, c: CameraIntrinsics, tol: float = 1e-8, max_iter: int = 20) -> np.ndarray:
    """Invert :func:`distort` by Newton iteration on normalized coordinates."""
    p = np.asarray(pixel_distorted, dtype=float)
    if not c.has_distortion:
        return p.copy()
    xd = (p[..., 0] - c.cx) / c.fx
    yd = (p[..., 1] - c.cy) / c.fy
    xn, yn = xd.copy(), yd.copy()
    tol_n = tol / max(c.fx, c.fy)
    for _ in range(max_iter):
        fx_, fy_, (j00, j01, j10, j11) = _radtan(xn, yn, c.distortion)
        ex, ey = fx_ - xd, fy_ - yd
        det = j00 * j11 - j01 * j10
        if np.any(det <= 0):
            raise DistortionDomainError("undistortion left the invertible region")
        dx = (j11 * ex - j01 * ey) / det
        dy = (-j10 * ex + j00 * ey) / det
        xn = xn - dx
        yn = yn - dy
        if np.all(np.abs(dx) < tol_n) and np.all(np.abs(dy) < tol_n):
            break
    else:
        raise DistortionDomainError("undistortion did not converge")
    return np.stack([c.fx * xn + c.cx, c.fy * yn + c.cy], axis=-1)


def pixel_grid(width: int, height: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width].astype(float)
    return np.stack([xs, ys], axis=-1)


def bilinear(grid: np.ndarray, px: np.ndarray):
    """Bilinear lookup of ``grid`` (H, W) at ``px`` (..., 2).

    Returns the value and its exact derivative within the cell. Pixels must
    lie in ``[0, W-1] x [0, H-1]``; callers check bounds.
    """
    H, W = grid.shape
    x = px[..., 0]
    y = px[..., 1]
    x0 = np.clip(np.floor(x).astype(np.intp), 0, W - 2)
    y0 = np.clip(np.floor(y).astype(np.intp), 0, H - 2)
    fx = x - x0
    fy = y - y0
    g00 = grid[y0, x0]
    g01 = grid[y0, x0 + 1]
    g10 = grid[y0 + 1, x0]
    g11 = grid[y0 + 1, x0 + 1]
    top = g00 + fx * (g01 - g00)
    bot = g10 + fx * (g11 - g10)
    value = top + fy * (bot - top)
    dx = (g01 - g00) + fy * ((g11 - g10) - (g01 - g00))
    dy = bot - top
    return value, np.stack([dx, dy], axis=-1)


@dataclass(frozen=True)
class RowTimeMap:
    """Distorted row ``f_d(x, y)_y`` sampled at every undistorted pixel."""

    grid: np.ndarray
    y0_distorted: float
    row_time_delta: float = field(default=0.0)

    @property
    def shape(self):
        return self.grid.shape

    def inside(self, px: np.ndarray) -> np.ndarray:
        H, W = self.grid.shape
        px = np.asarray(px, dtype=float)
        return (px[..., 0] >= 0) & (px[..., 0] <= W - 1) & (px[..., 1] >= 0) & (px[..., 1] <= H - 1)

    def lookup(self, px: np.ndarray):
        """Row time (rows) and its gradient w.r.t. the undistorted pixel.

        Out-of-image pixels are clamped; use :meth:`inside` to mask them.
        """
        H, W = self.grid.shape
        px = np.asarray(px, dtype=float)
        clamped = np.stack(
            [np.clip(px[..., 0], 0, W - 1), np.clip(px[..., 1], 0, H - 1)], axis=-1
        )
        v, g = bilinear(self.grid, clamped)
        return v - self.y0_distorted, g


def build_row_time_map(c: CameraIntrinsics) -> RowTimeMap:
    grid = distort(pixel_grid(c.width, c.height), c)[..., 1]
    if not np.all(np.isfinite(grid)):
        raise DistortionDomainError("row-time map is not finite")
    return RowTimeMap(grid=grid, y0_distorted=c.y0_distorted, row_time_delta=c.row_time_delta)


def row_time(pixel_undistorted, rmap: RowTimeMap) -> float:
    """Capture time of an undistorted pixel in rows relative to the reference row."""
    px = np.asarray(pixel_undistorted, dtype=float)
    if not np.all(rmap.inside(px)):
        raise OutOfImageError(f"pixel {px} outside image")
    t, _ = rmap.lookup(px)
    return t if t.ndim else float(t)


def undistort_image(image: np.ndarray, c: CameraIntrinsics) -> np.ndarray:
    """Resample a distorted image onto the undistorted pixel grid."""
    if not c.has_distortion:
        return np.asarray(image, dtype=float).copy()
    src = distort(pixel_grid(c.width, c.height), c)
    H, W = image.shape
    inside = (src[..., 0] >= 0) & (src[..., 0] <= W - 1) & (src[..., 1] >= 0) & (src[..., 1] <= H - 1)
    v, _ = bilinear(np.asarray(image, dtype=float), src)
    return np.where(inside, v, 0.0)


# -- calibration file -------------------------------------------------------

def read_calibration(path) -> CameraIntrinsics:
    entries = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *vals = line.split()
        if key in entries:
            raise CalibrationFormatError(f"line {lineno}: duplicate key {key!r}")
        expected = {"pinhole": 4, "radtan": 4, "none": 0, "size": 2, "row_time_delta": 1, "shutter": 1}
        if key not in expected:
            raise CalibrationFormatError(f"line {lineno}: unknown key {key!r}")
        if len(vals) != expected[key]:
            raise CalibrationFormatError(f"line {lineno}: {key} takes {expected[key]} values")
        entries[key] = vals
    for required in ("pinhole", "size", "row_time_delta"):
        if required not in entries:
            raise CalibrationFormatError(f"missing {required!r}")
    if "radtan" in entries and "none" in entries:
        raise CalibrationFormatError("both radtan and none given")
    try:
        fx, fy, cx, cy = map(float, entries["pinhole"])
        width, height = map(int, entries["size"])
        dt = float(entries["row_time_delta"][0])
        dist = tuple(map(float, entries["radtan"])) if "radtan" in entries else ()
    except ValueError as exc:
        raise CalibrationFormatError(str(exc)) from exc
    shutter = entries.get("shutter", ["rolling"])[0]
    if shutter not in ("rolling", "global"):
        raise CalibrationFormatError(f"bad shutter {shutter!r}")
    return CameraIntrinsics(fx, fy, cx, cy, width, height, dt, dist, shutter)


def write_calibration(path, c: CameraIntrinsics) -> None:
    lines = ["pinhole " + " ".join(repr(float(v)) for v in c.params)]
    lines.append("radtan " + " ".join(repr(float(d)) for d in c.distortion) if c.distortion else "none")
    lines.append(f"size {c.width} {c.height}")
    lines.append(f"row_time_delta {float(c.row_time_delta)!r}")
    lines.append(f"shutter {c.shutter}")
    Path(path).write_text("\n".join(lines) + "\n")
