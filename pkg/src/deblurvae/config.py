"""Training configuration and the flat ``key = value`` config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .circulant import resolve_epsilon
from .wiener import LOSS_KINDS

__all__ = ["TrainConfig", "parse_config_text", "load_config", "dump_config", "ConfigError"]


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    loss_kind: str = "proposed"
    C: float = 0.025
    epsilon: str = "large"
    beta: float = 1.0
    warmup_epochs: int = 10
    kernel_size: int = 11
    kernel_norm: str = "softmax"
    lr: float = 1e-4
    g_lr: float = 0.0  # 0 means: same as lr
    epochs: int = 25
    batch_size: int = 32
    seed: int = 0
    logdet: str = "omit"
    g_input: str = "posterior"
    latent_dim: int = 16
    channels: tuple = (32, 64, 128)
    hidden: int = 256
    g_hidden: int = 1000
    batchnorm: str = "auto"
    grad_clip: float = 0.0
    ckpt_every: int = 5
    eval_every: int = 1
    # dataset
    data: str = "shapes"
    n_images: int = 2000
    image_size: int = 32
    preset: str = "edges"
    data_seed: int = 0
    idx_path: str = ""
    idx_limit: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def eps_value(self) -> float:
        return resolve_epsilon(self.epsilon)

    @property
    def g_lr_value(self) -> float:
        return self.g_lr if self.g_lr > 0 else self.lr

    @property
    def use_batchnorm(self) -> bool:
        if self.batchnorm == "auto":
            return self.batch_size > 8
        return self.batchnorm == "on"

    def validate(self) -> None:
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.C <= 0:
            raise ConfigError("C must be positive")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs]")
        if self.logdet not in ("omit", "exact"):
            raise ConfigError("logdet must be 'omit' or 'exact'")
        if self.g_input not in ("posterior", "prior"):
            raise ConfigError("g_input must be 'posterior' or 'prior'")
        if self.batchnorm not in ("auto", "on", "off"):
            raise ConfigError("batchnorm must be auto, on or off")
        if self.kernel_norm not in ("softmax", "raw"):
            raise ConfigError("kernel_norm must be softmax or raw")
        try:
            resolve_epsilon(self.epsilon)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, overrides: dict) -> "TrainConfig":
        values = dataclasses.asdict(self)
        for key, raw in overrides.items():
            values[key] = _coerce(key, raw)
        return TrainConfig(**values)


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, raw):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(_FIELDS))}")
    if not isinstance(raw, str):
        return raw
    default = _FIELDS[key].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for {key}") from exc
    return raw


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        _coerce(key, value)
        out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Defaults, then file values, then ``overrides`` (highest precedence)."""
    cfg = TrainConfig()
    if path is not None:
        cfg = cfg.with_overrides(parse_config_text(Path(path).read_text()))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(i) for i in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: TrainConfig, extra: dict | None = None) -> str:
    lines = [f"{k} = {_fmt(v)}" for k, v in dataclasses.asdict(cfg).items()]
    if extra:
        lines.insert(0, "")
        for k, v in reversed(list(extra.items())):
            lines.insert(0, f"# {k}: {v}")
    return "\n".join(lines) + "\n"
