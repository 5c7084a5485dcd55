"""Run configuration: flat key-value config files, validation, defaults.

Every hyperparameter default matches the constants the pipeline is built
around (covariance bounds 5/0.05, mask gain 3, offset scale 4, loss weights
0.05/0.08, 8 unrolled iterations, batch 2). The truncation radius r1 is
always derived from the grid, never set directly; an `r1` config key is an
error like any other unknown key.
"""

from __future__ import annotations

from dataclasses import dataclass, fields


class ConfigError(ValueError):
    """Bad config file, unknown key, or invalid value (CLI exit code 3)."""


@dataclass
class RunConfig:
    h: int = 48
    w: int = 64
    c: int = 32
    d_h: int = 16
    r: int = 3
    alpha: float = 5.0
    beta: float = 0.05
    mask_scale: float = 3.0
    tau_s: float = 4.0
    gamma: float = 0.9
    lambda_flow: float = 0.05
    lambda_self: float = 0.08
    lr: float = 4e-4
    batch: int = 2
    iterations: int = 8
    steps: int = 2000
    seed: int = 0
    dtype: str = "f32"
    threads: int = 0
    deterministic: bool = True
    out_dir: str = "lgu_out"
    corpus_scenes: int = 200
    eval_scenes: int = 20
    motion_min: float = 0.5
    motion_max: float = 2.5
    ambiguous_fraction: float = 0.25
    noise_sigma: float = 0.01
    texture_cells: float = 2.0
    checkpoint_every: int = 500
    bench_sizes: str = "32,48,64,96"
    bench_repeat: int = 5

    @property
    def r1(self) -> int:
        return max(1, int(round((self.h + self.w) / 16.0)))

    def numpy_dtype(self):
        import numpy as np
        return np.float32 if self.dtype == "f32" else np.float64

    def scene_config(self):
        from .geometry import SceneConfig
        return SceneConfig(h=self.h, w=self.w, c=self.c,
                           motion_min=self.motion_min, motion_max=self.motion_max,
                           ambiguous_fraction=self.ambiguous_fraction,
                           noise_sigma=self.noise_sigma,
                           texture_cells=self.texture_cells, dtype=self.dtype)

    def bench_size_list(self) -> list[int]:
        try:
            sizes = [int(s) for s in self.bench_sizes.split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigError(f"bench_sizes must be comma-separated ints: {exc}") from exc
        if not sizes:
            raise ConfigError("bench_sizes is empty")
        return sizes

    def validate(self) -> "RunConfig":
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if self.h % 8 or self.w % 8:
            raise ConfigError(f"grid {self.h}x{self.w} must be divisible by 8 (4-level pyramid)")
        if self.r < 1:
            raise ConfigError(f"lookup radius must be >= 1, got {self.r}")
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("alpha and beta must be positive")
        if self.batch < 1 or self.iterations < 1 or self.steps < 0:
            raise ConfigError("batch/iterations must be >= 1 and steps >= 0")
        if not (0.0 <= self.ambiguous_fraction <= 0.95):
            raise ConfigError("ambiguous_fraction must be in [0, 0.95]")
        if self.motion_min < 0 or self.motion_max < self.motion_min:
            raise ConfigError("need 0 <= motion_min <= motion_max")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    typ = _FIELD_TYPES[key]
    raw = raw.strip()
    if typ in ("bool", bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if typ in ("int", int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an int, got {raw!r}") from exc
    if typ in ("float", float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a float, got {raw!r}") from exc
    return raw


def parse_config_file(path) -> dict:
    """Flat `key = value` lines; '#' starts a comment; unknown keys are errors."""
    values: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {text!r}")
            key, raw = (part.strip() for part in text.split("=", 1))
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            values[key] = _convert(key, raw)
    return values


def load_config(path=None, overrides: dict | None = None, env: dict | None = None) -> RunConfig:
    """Config file < CLI overrides < LGU_DTYPE env var, then validate."""
    values = parse_config_file(path) if path else {}
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = val
    if env is not None and env.get("LGU_DTYPE"):
        dtype = env["LGU_DTYPE"]
        if dtype not in ("f32", "f64"):
            raise ConfigError(f"LGU_DTYPE must be f32 or f64, got {dtype!r}")
        values["dtype"] = dtype
    return RunConfig(**values).validate()
