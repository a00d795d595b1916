"""Run configuration: a flat key=value schema shared by the config file,
the CLI flags and the echoed config written into every run directory.

Unknown keys are rejected; the echo is sufficient to rerun a command
without the original flags.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_ks(raw: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(part) for part in raw.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {raw!r}") \
            from None
    if not ks or any(k < 1 for k in ks):
        raise ConfigError(f"cutoff list must hold positive integers: {raw!r}")
    return ks


@dataclass
class RunConfig:
    """Union of model, training, data-path and command settings."""

    # paths and command specifics
    input: str | None = None
    format: str = "triplet"
    data: str | None = None
    out: str | None = None
    run_dir: str | None = None
    checkpoint: str | None = None
    split: str = "test"
    ks: tuple[int, ...] = (5, 10, 20)
    filter_seen: bool = False
    samples: int = 10
    # model
    dim: int = 256
    layers: int = 2
    heads: int = 2
    slide_window: int = 15
    dropout: float = 0.3
    mask_padding: bool = False
    # training
    epochs: int = 250
    batch_size: int = 256
    lr: float = 0.001
    decay_gamma: float = 0.1
    decay_every: int = 100
    mask_prob: float = 0.15
    num_views: int = 2
    tau: float = 0.3
    alpha: float = 0.1
    lam: float = 1.0
    stride: int = 1
    contrastive: bool = True
    loss_reduction: str = "mean"
    grad_clip: float = 0.0
    seed: int = 0


# config-file key -> (attribute, parser); "lambda" is a keyword in python,
# so it maps onto the "lam" attribute
_KEY_PARSERS = {
    "input": ("input", str),
    "format": ("format", str),
    "data": ("data", str),
    "out": ("out", str),
    "run_dir": ("run_dir", str),
    "checkpoint": ("checkpoint", str),
    "split": ("split", str),
    "ks": ("ks", _parse_ks),
    "filter_seen": ("filter_seen", _parse_bool),
    "samples": ("samples", int),
    "dim": ("dim", int),
    "layers": ("layers", int),
    "heads": ("heads", int),
    "slide_window": ("slide_window", int),
    "dropout": ("dropout", float),
    "mask_padding": ("mask_padding", _parse_bool),
    "epochs": ("epochs", int),
    "batch_size": ("batch_size", int),
    "lr": ("lr", float),
    "decay_gamma": ("decay_gamma", float),
    "decay_every": ("decay_every", int),
    "mask_prob": ("mask_prob", float),
    "num_views": ("num_views", int),
    "tau": ("tau", float),
    "alpha": ("alpha", float),
    "lambda": ("lam", float),
    "stride": ("stride", int),
    "contrastive": ("contrastive", _parse_bool),
    "loss_reduction": ("loss_reduction", str),
    "grad_clip": ("grad_clip", float),
    "seed": ("seed", int),
}

_ATTR_TO_KEY = {attr: key for key, (attr, _) in _KEY_PARSERS.items()}


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read key=value lines; '#' starts a comment, blank lines are skipped."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8")
                                  .splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def resolve_config(file_values: dict[str, str] | None = None,
                   overrides: dict[str, object] | None = None) -> RunConfig:
    """Defaults, then config-file values, then CLI overrides; validate."""
    merged: dict[str, object] = {}
    for key, raw in (file_values or {}).items():
        if key not in _KEY_PARSERS:
            raise ConfigError(f"unknown config key: {key!r}")
        attr, parser = _KEY_PARSERS[key]
        merged[attr] = parser(raw)
    for attr, value in (overrides or {}).items():
        if value is not None:
            merged[attr] = value
    cfg = RunConfig(**merged)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    if cfg.format not in ("triplet", "sequence"):
        raise ConfigError(f"format must be triplet or sequence, got {cfg.format!r}")
    if cfg.split not in ("validation", "test"):
        raise ConfigError(f"split must be validation or test, got {cfg.split!r}")
    if cfg.dim < 1 or cfg.heads < 1 or cfg.layers < 0:
        raise ConfigError("dim/heads must be positive, layers >= 0")
    if cfg.dim % cfg.heads != 0:
        raise ConfigError(f"dim {cfg.dim} not divisible by {cfg.heads} heads")
    if cfg.slide_window < 2:
        raise ConfigError("slide_window must be >= 2")
    if not 0.0 <= cfg.dropout < 1.0:
        raise ConfigError("dropout must be in [0, 1)")
    if not 0.0 < cfg.mask_prob < 1.0:
        raise ConfigError("mask_prob must be in (0, 1)")
    if cfg.num_views < 2:
        raise ConfigError("num_views must be >= 2")
    if cfg.epochs < 1 or cfg.batch_size < 1 or cfg.stride < 1:
        raise ConfigError("epochs, batch_size and stride must be >= 1")
    if cfg.lr <= 0 or cfg.tau <= 0 or cfg.lam <= 0:
        raise ConfigError("lr, tau and lambda must be positive")
    if not 0.0 <= cfg.alpha <= 1.0:
        raise ConfigError("alpha must be in [0, 1]")
    if cfg.decay_every < 1:
        raise ConfigError("decay_every must be >= 1")
    if cfg.grad_clip < 0:
        raise ConfigError("grad_clip must be >= 0")
    if cfg.loss_reduction not in ("mean", "sum"):
        raise ConfigError("loss_reduction must be 'mean' or 'sum'")
    if cfg.seed < 0:
        raise ConfigError("seed must be >= 0")
    if cfg.samples < 1:
        raise ConfigError("samples must be >= 1")


def echo_config(cfg: RunConfig) -> str:
    """Render the fully resolved config as reloadable key=value lines."""
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if value is None:
            continue
        key = _ATTR_TO_KEY[f.name]
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, tuple):
            rendered = ",".join(str(v) for v in value)
        else:
            rendered = str(value)
        lines.append(f"{key}={rendered}")
    return "\n".join(lines) + "\n"
