"""Odometry configuration, read from ``key = value`` text files."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # optimizer
    max_iterations: int = 10
    lambda_vel: float = 1e9
    huber_gamma: float = 9.0
    grad_weight_c: float = 50.0
    outlier_factor: float = 0.1  # threshold = factor * gamma^2 per pattern
    lm_init: float = 1e-4
    lm_min: float = 1e-8
    lm_max: float = 1e2
    lm_factor: float = 10.0
    step_tol: float = 1e-6
    energy_rel_tol: float = 1e-4  # stop once an accepted step gains less than this fraction
    fej: bool = True
    approx_pattern_jacobian: bool = True
    rs_method: str = "newton"
    # "per_pixel": every pattern pixel gets its own host row time and observation
    # time; "central": the pattern moves rigidly with the central pixel
    pattern_timing: str = "central"
    # priors
    affine_mode: str = "fixed"  # fixed | free | prior
    affine_prior_a: float = 1e-1
    affine_prior_b: float = 1e-1
    optimize_intrinsics: bool = True
    intrinsics_prior: float = 1e4
    gauge_pose_prior: float = 1e4
    gauge_depth_prior: float = 1e3
    # front-end
    window_size: int = 7
    visibility_min: float = 0.05
    num_active_points: int = 800
    candidates_per_keyframe: int = 1000
    keyframe_flow_threshold: float = 28.0
    keyframe_translation_threshold: float = 14.0
    keyframe_affine_threshold: float = 0.1
    keyframe_max_interval: int = 10
    depth_init_noise: float = 0.05
    min_obs_marginalize: int = 1
    pyramid_levels: int = 4
    track_iterations: int = 8
    track_max_energy: float = 30.0
    track_points: int = 400

    def __post_init__(self):
        if self.affine_mode not in ("fixed", "free", "prior"):
            raise ConfigError(f"affine_mode must be fixed|free|prior, got {self.affine_mode!r}")
        if self.rs_method not in ("newton", "fixed_point"):
            raise ConfigError(f"rs_method must be newton|fixed_point, got {self.rs_method!r}")
        if self.pattern_timing not in ("per_pixel", "central"):
            raise ConfigError(f"pattern_timing must be per_pixel|central, got {self.pattern_timing!r}")
        if not 0 < self.visibility_min < 1:
            raise ConfigError("visibility_min must be in (0, 1)")
        if self.window_size < 2:
            raise ConfigError("window_size must be at least 2")
        if self.huber_gamma <= 0:
            raise ConfigError("huber_gamma must be positive")

    @property
    def outlier_threshold(self) -> float:
        return self.outlier_factor * self.huber_gamma**2


def _coerce(kind: str, raw: str):
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_text(text: str, base: Config | None = None) -> Config:
    kinds = {f.name: f.type for f in dataclasses.fields(Config)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(kinds[key], val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    return dataclasses.replace(base or Config(), **values)


def load_config(path) -> Config:
    return parse_config_text(Path(path).read_text())


def dump_config(cfg: Config) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg))
