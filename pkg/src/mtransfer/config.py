"""Training configuration and its plain ``key=value`` text form."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

TINY_CONTENT_LAYER = "relu4_1"


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 10000
    batch_size: int = 1
    lr: float = 1e-3
    lr_decay: float = 0.8
    lr_step: int = 2000
    alpha: float = 1.0
    beta: float = 10.0
    lambdas: tuple[float, ...] = (1.0, 0.5, 0.25)
    content_layer: str = "relu4_2"
    texture_layers: tuple[str, ...] = ("relu1_1", "relu2_1", "relu3_1", "relu4_1")
    train_scales: tuple[int, ...] = (256, 512, 512)
    style_scales: tuple[int, ...] = (256, 512, 512)
    # style image index per level; empty = one shared style, or one per level
    style_assignment: tuple[int, ...] = ()
    seed: int = 0
    tiny: int = 0
    min_dim: int = 480
    crop: str = "center"
    content_target: str = "input"
    pooling: str = "max"
    # MTWT container for the loss network; empty selects the seeded tiny network
    loss_weights: str = ""
    loss_seed: int = 0
    checkpoint_every: int = 1000

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.iterations <= 0:
            raise ConfigError(f"iterations must be > 0, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1 or self.lr_step < 1:
            raise ConfigError("need lr > 0, 0 < lr_decay <= 1, lr_step >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if len(self.lambdas) != 3:
            raise ConfigError(f"need one level weight per level (3), got {self.lambdas}")
        if any(l < 0 for l in self.lambdas) or not any(l > 0 for l in self.lambdas):
            raise ConfigError(f"level weights must be >= 0 with at least one > 0, got {self.lambdas}")
        for name in ("train_scales", "style_scales"):
            v = getattr(self, name)
            if len(v) != 3 or any(s < 1 for s in v):
                raise ConfigError(f"{name} needs three positive sizes, got {v}")
        s1, s2, s3 = self.train_scales
        if s2 != s3:
            raise ConfigError(f"refine trains at the enhance size: train_scales[1] must equal train_scales[2], got {self.train_scales}")
        if s1 % 4 or s2 % 8:
            raise ConfigError(f"train_scales must be multiples of (4, 8, 8), got {self.train_scales}")
        if self.style_assignment and len(self.style_assignment) != 3:
            raise ConfigError(f"style_assignment needs three entries, got {self.style_assignment}")
        if self.tiny < 0:
            raise ConfigError(f"tiny divisor must be >= 0, got {self.tiny}")
        if self.crop not in ("center", "random"):
            raise ConfigError(f"crop must be 'center' or 'random', got {self.crop!r}")
        if self.content_target not in ("input", "original"):
            raise ConfigError(f"content_target must be 'input' or 'original', got {self.content_target!r}")
        if self.pooling not in ("max", "avg"):
            raise ConfigError(f"pooling must be 'max' or 'avg', got {self.pooling!r}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")

    @property
    def width_divisor(self) -> int:
        return self.tiny if self.tiny > 0 else 1

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    # -- text form ---------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls(**parse_values(parse_lines(text)))


_FIELDS = {f.name: f for f in fields(TrainConfig)}
_DEFAULTS = {f.name: f.default for f in fields(TrainConfig)}


def _format(v: Any) -> str:
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment, blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def _convert(key: str, value: Any) -> Any:
    default = _DEFAULTS[key]
    if not isinstance(value, str):
        return tuple(value) if isinstance(default, tuple) else value
    try:
        if isinstance(default, tuple):
            items = [s.strip() for s in value.split(",") if s.strip()]
            # element type from the default; style_assignment defaults empty
            kind = type(default[0]) if default else int
            return tuple(kind(s) for s in items)
        if isinstance(default, bool):
            return value.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None


def parse_values(raw: Mapping[str, Any]) -> dict[str, Any]:
    out = {}
    for key, value in raw.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        out[key] = _convert(key, value)
    return out


def tiny_preset(divisor: int) -> dict[str, Any]:
    """Scales and dataset filter shrunk by the width divisor."""
    return {
        "tiny": divisor,
        "train_scales": (256 // divisor, 512 // divisor, 512 // divisor),
        "style_scales": (256 // divisor, 512 // divisor, 512 // divisor),
        "min_dim": 480 // divisor,
    }


def resolve_config(explicit: Mapping[str, Any]) -> TrainConfig:
    """Defaults, then the tiny preset, then explicitly given keys.

    Without a loss-network weights file the tiny extractor is used, whose
    deepest layer is ``relu4_1``; that becomes the content layer unless one
    was set explicitly.
    """
    values = parse_values(explicit)
    merged: dict[str, Any] = {}
    if values.get("tiny", 0):
        merged.update(tiny_preset(values["tiny"]))
    if not values.get("loss_weights"):
        merged["content_layer"] = TINY_CONTENT_LAYER
    merged.update(values)
    try:
        return TrainConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config_file(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 ({exc})") from None
    return parse_lines(text, str(path))


__all__ = ["TrainConfig", "parse_lines", "parse_values", "resolve_config", "tiny_preset", "load_config_file"]
