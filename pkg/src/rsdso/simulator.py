"""Synthetic rolling/global shutter sequences of a textured box room.

The scene is a set of planes with sum-of-sinusoid textures, so intensities
and depths at any ray are exact. Ground-truth motion is piecewise
constant-twist with knots at frame midpoints, which means every frame's
readout lies inside a single constant-velocity segment.
"""
from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lie_groups as lie
from .camera_model import CameraIntrinsics, distort, pixel_grid, undistort, write_calibration


class DatasetError(IOError):
    pass


# -- scene -----------------------------------------------------------------------------

@dataclass
class TexturedPlane:
    """Plane ``n . X = d`` with orthonormal in-plane axes ``u, v``."""

    normal: np.ndarray
    offset: float
    u: np.ndarray
    v: np.ndarray
    freqs: np.ndarray  # (K, 2) angular frequency in (u, v) per metre
    amps: np.ndarray
    phases: np.ndarray
    base: float = 128.0
    center: np.ndarray | None = None  # finite rectangle around ``center`` if set
    extent: tuple | None = None  # half sizes along ``u`` and ``v``

    def contains(self, X: np.ndarray) -> np.ndarray:
        if self.center is None or self.extent is None:
            return np.ones(X.shape[:-1], dtype=bool)
        d = X - self.center
        return (np.abs(d @ self.u) <= self.extent[0]) & (np.abs(d @ self.v) <= self.extent[1])

    def texture(self, X: np.ndarray) -> np.ndarray:
        s = X @ self.u
        t = X @ self.v
        arg = s[..., None] * self.freqs[:, 0] + t[..., None] * self.freqs[:, 1] + self.phases
        return self.base + np.sum(self.amps * np.sin(arg), axis=-1)


@dataclass
class Scene:
    planes: list = field(default_factory=list)
    background: float = 0.0

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        """Nearest positive hit along each ray: (distance, plane index), inf/-1 on a miss."""
        best = np.full(dirs.shape[:-1], np.inf)
        idx = np.full(dirs.shape[:-1], -1, dtype=np.intp)
        for k, pl in enumerate(self.planes):
            denom = dirs @ pl.normal
            num = pl.offset - origins @ pl.normal
            with np.errstate(divide="ignore", invalid="ignore"):
                lam = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
            hit = (lam > 1e-9) & (lam < best)
            if pl.center is not None and hit.any():
                lam_h = np.where(hit, lam, 0.0)
                hit &= pl.contains(origins + lam_h[..., None] * dirs)
            best = np.where(hit, lam, best)
            idx = np.where(hit, k, idx)
        return best, idx

    def shade(self, points: np.ndarray, idx: np.ndarray) -> np.ndarray:
        out = np.full(idx.shape, self.background, dtype=float)
        for k, pl in enumerate(self.planes):
            m = idx == k
            if m.any():
                out[m] = pl.texture(points[m])
        return out


def _random_texture(rng, n_waves, wavelengths):
    ang = rng.uniform(0, np.pi, n_waves)
    k = 2 * np.pi / rng.uniform(*wavelengths, n_waves)
    freqs = np.stack([k * np.cos(ang), k * np.sin(ang)], axis=1)
    amps = rng.uniform(0.5, 1.0, n_waves)
    amps *= 120.0 / amps.sum()
    return freqs, amps, rng.uniform(0, 2 * np.pi, n_waves)


def box_room(seed: int = 0, half_size=(2.5, 1.5, 3.0), n_waves: int = 10,
             wavelengths=(0.15, 1.0), n_panels: int = 4) -> Scene:
    """Six inward-facing walls of an axis-aligned box centred at the origin,
    plus ``n_panels`` free-standing rectangles in front of the start pose."""
    rng = np.random.default_rng(seed)
    hx, hy, hz = half_size
    e = np.eye(3)
    specs = [
        (e[0], hx, e[1], e[2]), (-e[0], hx, e[1], e[2]),
        (e[1], hy, e[0], e[2]), (-e[1], hy, e[0], e[2]),
        (e[2], hz, e[0], e[1]), (-e[2], hz, e[0], e[1]),
    ]
    planes = []
    for n, d, u, v in specs:
        # plane n.X = d on the positive side, -n.X = d on the negative side
        planes.append(TexturedPlane(n, d, u, v, *_random_texture(rng, n_waves, wavelengths)))
    # panels: spread over the view, facing the camera within +-40 degrees
    xs = np.linspace(-1.2, 1.2, n_panels) if n_panels > 1 else np.zeros(n_panels)
    for i in range(n_panels):
        yaw = rng.uniform(-0.7, 0.7)
        n = np.array([np.sin(yaw), 0.0, -np.cos(yaw)])
        u = np.array([np.cos(yaw), 0.0, np.sin(yaw)])
        center = np.array([xs[i] + rng.uniform(-0.2, 0.2), rng.uniform(-0.6, 0.6),
                           rng.uniform(1.5, min(2.6, hz - 0.3))])
        extent = (rng.uniform(0.3, 0.5), rng.uniform(0.3, 0.6))
        planes.append(TexturedPlane(n, float(n @ center), u, e[1], *_random_texture(rng, n_waves, wavelengths),
                                    center=center, extent=extent))
    return Scene(planes)


# -- trajectories ------------------------------------------------------------------------

def _rot_xy(pitch, yaw):
    cp, sp, cy, sy = np.cos(pitch), np.sin(pitch), np.cos(yaw), np.sin(yaw)
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    return Ry @ Rx


def _smooth_pose(preset: str, t: float, radius: float, omega: float, amplitude: float) -> np.ndarray:
    """World-to-camera pose of a smooth preset path at time ``t``."""
    w = omega * t
    if preset == "static":
        pos, R = np.zeros(3), np.eye(3)
    elif preset == "circle":
        pos = np.array([radius * np.cos(w) - radius, radius * np.sin(w), 0.0])
        R = _rot_xy(amplitude * np.sin(w), amplitude * (np.cos(w) - 1.0))
    elif preset == "alt-circle":
        pos = np.array([radius * np.sin(w), 0.0, radius * (np.cos(w) - 1.0)])
        R = _rot_xy(amplitude * (1.0 - np.cos(w)), amplitude * np.sin(w))
    elif preset == "infinity":
        pos = np.array([radius * np.sin(w), 0.5 * radius * np.sin(2 * w), 0.0])
        R = _rot_xy(0.5 * amplitude * np.sin(2 * w), amplitude * np.sin(w))
    else:
        raise ValueError(f"unknown trajectory preset {preset!r}")
    T = np.eye(4)
    T[:3, :3] = R.T
    T[:3, 3] = -R.T @ pos
    return T


class GroundTruthTrajectory:
    """Piecewise constant-twist world-to-camera poses.

    Knots sit at ``(k - 1/2) / fps``; twists are per second.
    """

    def __init__(self, knot_times: np.ndarray, knot_poses: np.ndarray):
        self.knot_times = np.asarray(knot_times, dtype=float)
        self.knot_poses = np.asarray(knot_poses, dtype=float)
        dt = np.diff(self.knot_times)
        rel = np.einsum("nij,njk->nik", self.knot_poses[1:], lie.inverse(self.knot_poses[:-1]))
        self.twists = np.array([lie.log_se3(r) for r in rel]) / dt[:, None]

    @classmethod
    def from_preset(cls, preset: str, n_frames: int, fps: float, radius=0.5, omega=1.5, amplitude=0.3):
        tk = (np.arange(n_frames + 1) - 0.5) / fps
        poses = np.array([_smooth_pose(preset, t, radius, omega, amplitude) for t in tk])
        return cls(tk, poses)

    @property
    def t_start(self) -> float:
        return float(self.knot_times[0])

    @property
    def t_end(self) -> float:
        return float(self.knot_times[-1])

    def segment(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(t < self.t_start - 1e-12) or np.any(t > self.t_end + 1e-12):
            raise ValueError("time outside trajectory span")
        return np.clip(np.searchsorted(self.knot_times, t, side="right") - 1, 0, len(self.twists) - 1)

    def poses(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        k = self.segment(t)
        E = lie.exp_se3_batch(self.twists[k] * (t - self.knot_times[k])[:, None])
        return E @ self.knot_poses[k]

    def pose(self, t: float) -> np.ndarray:
        return self.poses([t])[0]

    def twist(self, t: float) -> np.ndarray:
        return self.twists[int(self.segment(t))].copy()


# -- rendering ------------------------------------------------------------------------------

def _rays(c: CameraIntrinsics):
    """Unit-z rays for every distorted pixel plus each pixel's row offset."""
    dist = pixel_grid(c.width, c.height)
    und = undistort(dist, c) if c.has_distortion else dist
    rays = np.stack([(und[..., 0] - c.cx) / c.fx, (und[..., 1] - c.cy) / c.fy, np.ones(und.shape[:-1])], -1)
    return rays, dist[..., 1] - c.y0_distorted


def _cast(scene, Tw2c, rays):
    """Cast camera-frame rays with per-ray world-to-camera pose; returns (value, z, hit)."""
    R = Tw2c[..., :3, :3]
    t = Tw2c[..., :3, 3]
    origins = -np.einsum("...ji,...j->...i", R, t)
    dirs = np.einsum("...ji,...j->...i", R, rays)
    lam, idx = scene.intersect(origins, dirs)
    hit = idx >= 0
    pts = origins + np.where(hit, lam, 0.0)[..., None] * dirs
    return scene.shade(pts, idx), np.where(hit, lam * rays[..., 2], np.inf), hit


def render_frame(scene: Scene, traj: GroundTruthTrajectory, t_frame: float, c: CameraIntrinsics,
                 shutter: str = "rolling"):
    """Distorted image and validity mask of the frame read out around ``t_frame``."""
    if shutter not in ("rolling", "global"):
        raise ValueError(f"unknown shutter {shutter!r}")
    rays, rows = _rays(c)
    if shutter == "global" or c.row_time_delta == 0:
        T = traj.pose(t_frame)
        val, _, hit = _cast(scene, T, rays)
    else:
        # one pose per distorted row
        row_t = t_frame + (np.arange(c.height) - c.y0_distorted) * c.row_time_delta
        T = traj.poses(row_t)[:, None].repeat(c.width, axis=1)
        val, _, hit = _cast(scene, T, rays)
    return val, hit


def render_inverse_depth(scene: Scene, traj: GroundTruthTrajectory, t_frame: float, c: CameraIntrinsics,
                         shutter: str = "rolling") -> np.ndarray:
    """Inverse depth on the undistorted pixel grid, each pixel at its own capture time.

    A point seen at undistorted pixel ``p`` was captured while row
    ``f_d(p)_y`` was read out; its depth is measured in that row's camera.
    """
    und = pixel_grid(c.width, c.height)
    rays = np.stack([(und[..., 0] - c.cx) / c.fx, (und[..., 1] - c.cy) / c.fy, np.ones(und.shape[:-1])], -1)
    if shutter == "global" or c.row_time_delta == 0:
        _, z, hit = _cast(scene, traj.pose(t_frame), rays)
    else:
        rt = distort(und, c, check_domain=False)[..., 1] - c.y0_distorted
        times = np.clip(t_frame + rt * c.row_time_delta, traj.t_start, traj.t_end)
        T = traj.poses(times.ravel()).reshape(c.height, c.width, 4, 4)
        _, z, hit = _cast(scene, T, rays)
    return np.where(hit & np.isfinite(z) & (z > 0), 1.0 / np.where(hit, z, 1.0), 0.0).astype(np.float32)


# -- dataset configuration and IO ------------------------------------------------------------

@dataclass
class SimConfig:
    preset: str = "circle"
    frames: int = 300
    fps: float = 30.0
    width: int = 320
    height: int = 240
    fx: float = 250.0
    fy: float = 250.0
    cx: float = 159.5
    cy: float = 119.5
    row_time_delta: float = 1e-4
    distortion: str = ""  # "k1 k2 p1 p2" or empty
    shutter: str = "rolling"
    radius: float = 0.5
    omega: float = 1.5
    amplitude: float = 0.3
    scene_seed: int = 0
    panels: int = 4
    noise_sigma: float = 0.0
    seed: int = 0

    def camera(self) -> CameraIntrinsics:
        dist = tuple(float(x) for x in self.distortion.split()) if self.distortion.strip() else ()
        dt_r = self.row_time_delta if self.shutter == "rolling" else 0.0
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height, dt_r,
                                dist, self.shutter)


def parse_sim_config(text: str) -> SimConfig:
    kinds = {f.name: f.type for f in dataclasses.fields(SimConfig)}
    vals = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in kinds:
            raise ValueError(f"line {lineno}: unknown key {k!r}")
        vals[k] = {"int": int, "float": float}.get(kinds[k], str)(v)
    return SimConfig(**vals)


def write_pgm16(path, image: np.ndarray) -> None:
    data = np.clip(np.rint(np.asarray(image) * 256.0), 0, 65535).astype(">u2")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode())
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8- or 16-bit binary PGM into float intensities on a 0..255 scale."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM")
    w, h, maxval = (int(x) for x in tokens[1:])
    if maxval > 255:
        img = np.frombuffer(raw, dtype=">u2", count=w * h, offset=pos).astype(float)
        # 16-bit files store intensity x 256
        return img.reshape(h, w) * (65536.0 / (maxval + 1)) / 256.0
    img = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).astype(float)
    return img.reshape(h, w)


def write_idepth(path, idepth: np.ndarray) -> None:
    h, w = idepth.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<ii", w, h))
        f.write(np.ascontiguousarray(idepth, dtype="<f4").tobytes())


def read_idepth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h = struct.unpack("<ii", raw[:8])
    if len(raw) != 8 + 4 * w * h:
        raise DatasetError(f"{path}: size mismatch")
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(h, w).astype(float)


def generate_sequence(cfg: SimConfig, out_dir, scene: Scene | None = None) -> Path:
    """Render a full dataset to ``out_dir``; everything is determined by ``cfg``."""
    from .evaluation import Trajectory, write_tum

    out = Path(out_dir)
    try:
        (out / "frames").mkdir(parents=True, exist_ok=True)
        (out / "idepth").mkdir(exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {out}: {exc}") from exc
    c = cfg.camera()
    scene = box_room(cfg.scene_seed, n_panels=cfg.panels) if scene is None else scene
    traj = GroundTruthTrajectory.from_preset(cfg.preset, cfg.frames, cfg.fps, cfg.radius, cfg.omega, cfg.amplitude)
    rng = np.random.default_rng(cfg.seed)
    times = np.arange(cfg.frames) / cfg.fps
    for i, t in enumerate(times):
        img, _ = render_frame(scene, traj, t, c, cfg.shutter)
        if cfg.noise_sigma > 0:
            img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
        write_pgm16(out / "frames" / f"{i:06d}.pgm", img)
        write_idepth(out / "idepth" / f"{i:06d}.bin", render_inverse_depth(scene, traj, t, c, cfg.shutter))
    (out / "times.txt").write_text("".join(f"{i} {float(t)!r}\n" for i, t in enumerate(times)))
    write_calibration(out / "calib.txt", c)
    gt = Trajectory(times, lie.inverse(traj.poses(times)))
    write_tum(out / "groundtruth.txt", gt)
    # per-row twists are not part of the TUM file; keep them for diagnostics
    np.savetxt(out / "velocities.txt", np.array([traj.twist(t) * c.row_time_delta for t in times]))
    return out


def generate_twins(cfg: SimConfig, out_dir) -> tuple[Path, Path]:
    """Rolling and global shutter renders of the same scene and trajectory."""
    out = Path(out_dir)
    rs = generate_sequence(dataclasses.replace(cfg, shutter="rolling"), out / "rs")
    gs = generate_sequence(dataclasses.replace(cfg, shutter="global"), out / "gs")
    return rs, gs


@dataclass
class Dataset:
    root: Path
    calib: CameraIntrinsics
    times: np.ndarray

    @classmethod
    def open(cls, root):
        from .camera_model import read_calibration

        root = Path(root)
        if not (root / "calib.txt").exists() or not (root / "times.txt").exists():
            raise DatasetError(f"{root}: not a dataset directory")
        calib = read_calibration(root / "calib.txt")
        rows = [ln.split() for ln in (root / "times.txt").read_text().splitlines() if ln.strip()]
        times = np.array([float(r[1]) for r in rows])
        return cls(root, calib, times)

    def __len__(self):
        return len(self.times)

    def image(self, i: int) -> np.ndarray:
        return read_pgm(self.root / "frames" / f"{i:06d}.pgm")

    def inverse_depth(self, i: int) -> np.ndarray:
        return read_idepth(self.root / "idepth" / f"{i:06d}.bin")

    def groundtruth(self):
        from .evaluation import read_tum

        return read_tum(self.root / "groundtruth.txt")
