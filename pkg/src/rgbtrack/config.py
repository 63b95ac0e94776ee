"""Flat ``key=value`` run configuration.

Every key has a default; unknown keys are an error. Lists are comma
separated (an empty value is an empty list). ``#`` starts a comment.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .backbone import ModelConfig
from .errors import ConfigError


@dataclass
class RunConfig(ModelConfig):
    # optimisation
    optimizer: str = "sgd"
    lr: float = 1e-4
    lr_backbone: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 20
    samples_per_epoch: int = 512
    batch_size: int = 8
    lr_decay_at: float = 2.0 / 3.0
    lr_decay_factor: float = 0.1
    grad_clip: float = 0.0
    bridge_lr_group: str = "other"  # "backbone" trains the bridging modules at lr_backbone
    max_frame_gap: int = 10
    centre_jitter: float = 0.25
    scale_jitter: float = 0.2
    # data generation
    gen_suites: tuple = ("clean", "low_light", "thermal_crossover")
    gen_sequences: int = 4
    gen_frames: int = 30
    gen_frame_size: int = 256
    # evaluation
    pr_threshold: float = 20.0
    npr_threshold: float = 0.1
    # benchmark
    bench_frames: int = 8
    bench_warmup: int = 1

    def __post_init__(self):
        self.gen_suites = tuple(self.gen_suites)
        super().__post_init__()

    def validate(self):
        super().validate()
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"optimizer must be sgd or adamw, got {self.optimizer!r}")
        for name in ("epochs", "samples_per_epoch", "batch_size", "gen_frames", "gen_frame_size",
                     "bench_frames", "max_frame_gap"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.bridge_lr_group not in ("backbone", "other"):
            raise ConfigError(f"bridge_lr_group must be backbone or other, got {self.bridge_lr_group!r}")
        if self.gen_sequences < 0 or self.bench_warmup < 0:
            raise ConfigError("gen_sequences and bench_warmup must be >= 0")
        if self.lr < 0 or self.lr_backbone < 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("learning rates, weight_decay and grad_clip must be >= 0")
        if not 0 <= self.momentum < 1 or not 0 < self.lr_decay_at <= 1:
            raise ConfigError("momentum must be in [0, 1) and lr_decay_at in (0, 1]")

    def model_config(self):
        return ModelConfig(**{f.name: getattr(self, f.name) for f in fields(ModelConfig)})

    def echo(self):
        """Canonical ``key=value`` text; stable for identical configurations."""
        return "".join(f"{k}={format_value(v)}\n" for k, v in asdict(self).items())


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def _parse(name, raw, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            if name.endswith("_layers"):
                return tuple(int(s) for s in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_text(text, base=None):
    """Apply ``key=value`` lines on top of ``base`` (defaults if omitted)."""
    values = asdict(base) if base is not None else {f.name: f.default for f in fields(RunConfig)}
    known = {f.name for f in fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        values[key] = _parse(key, raw, _default(key))
    return RunConfig(**values)


def _default(key):
    for f in fields(RunConfig):
        if f.name == key:
            return f.default
    raise KeyError(key)


def load(path=None, overrides=None):
    """Read a config file (or defaults) and apply ``overrides`` (a dict of raw strings)."""
    text = ""
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text()
    if overrides:
        text += "\n" + "\n".join(f"{k}={v}" for k, v in overrides.items())
    return parse_text(text)
