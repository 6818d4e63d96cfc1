"""Flat, typed run configuration: one YAML document, every key overridable
on the command line. Unknown keys are rejected before any work starts."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import yaml

from .pipeline import PipelineConfig
from .pose_opt import PoseOptConfig


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    input: str = ""
    output_dir: str = "out"
    backend: str = "procedural"      # procedural | remote
    remote_url: str = ""
    remote_timeout: float = 300.0
    prompt: str = ""
    n_additional: int = 4
    max_inpaint_iters: int = 6
    ungrown_stop_frac: float = 0.01
    opt_iters_per_view: int = 300
    lr_color: float = 0.01
    lr_opacity: float = 0.005
    mask_dilation_px: int = 3
    camera_radius: float = 2.5
    fov_deg: float = 45.0
    width: int = 512
    height: int = 512
    cardinal_azimuth_offset: float = 0.0
    k_blend: int = 8
    bandwidth: float = 0.0           # 0 = auto
    threads: int = 0                 # 0 = hardware default
    pose_restarts: int = 8
    pose_max_iters: int = 200
    pose_step_size: float = 0.05
    pose_convergence_tol: float = 1e-5
    tau: float = 50.0
    fd_step: float = 1e-3
    exact_pairs: bool = False
    tau_scales_all: bool = False
    deterministic: bool = True       # always on; documented, not switchable

    @property
    def k_total(self) -> int:
        return 6 + self.n_additional

    def validate(self) -> None:
        if self.backend not in ("procedural", "remote"):
            raise ConfigError(f"backend must be procedural or remote, got '{self.backend}'")
        if self.backend == "remote" and not self.remote_url:
            raise ConfigError("remote backend requires remote_url")
        if not self.deterministic:
            raise ConfigError("deterministic mode is always on and cannot be disabled")
        if not 0.0 < self.fov_deg < 180.0:
            raise ConfigError("fov_deg must be in (0, 180)")
        if self.width < 8 or self.height < 8:
            raise ConfigError("resolution must be at least 8x8")
        if self.n_additional < 0:
            raise ConfigError("n_additional must be >= 0")
        if self.max_inpaint_iters < 1:
            raise ConfigError("max_inpaint_iters must be >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.pose_restarts < 1:
            raise ConfigError("pose_restarts must be >= 1")
        if self.camera_radius <= 1.0:
            raise ConfigError("camera_radius must exceed the unit scene radius")

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            n_additional=self.n_additional,
            max_inpaint_iters=self.max_inpaint_iters,
            ungrown_stop_frac=self.ungrown_stop_frac,
            opt_iters_per_view=self.opt_iters_per_view,
            lr_color=self.lr_color,
            lr_opacity=self.lr_opacity,
            mask_dilation_px=self.mask_dilation_px,
            prompt=self.prompt,
            camera_radius=self.camera_radius,
            width=self.width,
            height=self.height,
            fov_deg=self.fov_deg,
            cardinal_azimuth_offset=self.cardinal_azimuth_offset,
            k_blend=self.k_blend,
            bandwidth=self.bandwidth,
            threads=self.threads,
            pose=PoseOptConfig(
                restarts=self.pose_restarts,
                max_iters=self.pose_max_iters,
                step_size=self.pose_step_size,
                convergence_tol=self.pose_convergence_tol,
                tau=self.tau,
                fd_step=self.fd_step,
                exact_pairs=self.exact_pairs,
                tau_scales_all=self.tau_scales_all,
            ),
        )

    def dump(self) -> str:
        return yaml.safe_dump(asdict(self), sort_keys=True)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value):
    ftype = _FIELD_TYPES[key]
    if isinstance(value, str):
        if ftype == "bool":
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"bad boolean for {key}: '{value}'")
        if ftype == "int":
            return int(value)
        if ftype == "float":
            return float(value)
        return value
    if ftype == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean")
        return value
    if ftype == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if ftype == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if ftype == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
    return value


def from_mapping(raw: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in raw.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key: '{key}'")
        setattr(cfg, key, _coerce(key, value))
    cfg.validate()
    return cfg


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    raw = {}
    if path:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must be a flat key-value mapping")
        raw.update(loaded)
    if overrides:
        raw.update(overrides)
    return from_mapping(raw)
