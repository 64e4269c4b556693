"""Model hyper-parameters and their plain-text serialization."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

HEAD_MODES = ("concat-cls", "per-level-average")
CROSS_LEVEL_MODES = ("ctmm", "concat", "sum", "none")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    channels: int = 192
    depth: int = 4
    heads: int = 3
    num_genes: int = 250
    num_levels: int = 3
    mask_prob: float = 0.1
    se_ratio: int = 4
    head_mode: str = "concat-cls"
    levels_enabled: tuple[int, ...] | None = None
    use_dpe: bool = True
    decoupled_itmm: bool = True
    use_ctmm: str = "ctmm"
    use_ccmm: bool = True
    mlp_ratio: int = 4
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.levels_enabled is not None:
            object.__setattr__(self, "levels_enabled", tuple(sorted(int(x) for x in self.levels_enabled)))

    @property
    def levels(self) -> tuple[int, ...]:
        if self.levels_enabled is None:
            return tuple(range(self.num_levels))
        return self.levels_enabled

    @property
    def num_streams(self) -> int:
        return len(self.levels)

    @property
    def tokens_per_unit(self) -> int:
        """L = H*W / p^2."""
        return (self.image_size // self.patch_size) ** 2

    def validate(self) -> "ModelConfig":
        if not 1 <= self.num_levels <= 4:
            raise ConfigError(f"num_levels must be in 1..4, got {self.num_levels}")
        if not self.levels:
            raise ConfigError("levels_enabled is empty")
        if len(set(self.levels)) != len(self.levels) or any(not 0 <= lv < self.num_levels for lv in self.levels):
            raise ConfigError(f"levels_enabled {self.levels} not a subset of 0..{self.num_levels - 1}")
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if (self.num_streams * self.channels) % self.se_ratio:
            raise ConfigError(f"M*C = {self.num_streams * self.channels} not divisible by se_ratio {self.se_ratio}")
        if self.num_genes < 1:
            raise ConfigError("num_genes must be >= 1")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {HEAD_MODES}")
        if self.use_ctmm not in CROSS_LEVEL_MODES:
            raise ConfigError(f"use_ctmm must be one of {CROSS_LEVEL_MODES}")
        if not 0.0 <= self.mask_prob < 1.0:
            raise ConfigError("mask_prob must be in [0, 1)")
        if self.image_size % self.patch_size:
            raise ConfigError(f"patch size {self.patch_size} does not divide image size {self.image_size}")
        if self.use_dpe:
            top = max(self.levels)
            if self.patch_size % (2 ** top):
                raise ConfigError(f"patch size {self.patch_size} cannot be halved {top} times")
            if top and self.image_size % (2 ** (top + 1)):
                raise ConfigError(f"central regions of a {self.image_size}px image are not pixel aligned "
                                  f"for {top + 1} levels")
        return self

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["levels_enabled"] = list(self.levels)
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 96
    epochs: int = 100
    seed: int = 0
    missing_level_fraction: float = 0.0
    eval_every: int = 0
    max_steps: int | None = None
    eval_batch_size: int = 64
    threads: int = 1

    def validate(self) -> "TrainConfig":
        if not 0.0 <= self.missing_level_fraction <= 1.0:
            raise ConfigError("missing_level_fraction must be in [0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        return self


def _format_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def dump_config_text(cfg) -> str:
    """``key=value`` lines, one per field, sorted by key."""
    d = cfg.to_dict() if hasattr(cfg, "to_dict") else dataclasses.asdict(cfg)
    return "".join(f"{k}={_format_value(d[k])}\n" for k in sorted(d))


def parse_value(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if text.lower() == "none":
        return None
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, (tuple, list)):
        return tuple(int(x) for x in text.split(",") if x.strip())
    return text


def config_from_mapping(cls, mapping: dict, base=None):
    """Build ``cls`` from string values, typed after the defaults; unknown keys are rejected."""
    base = base or cls()
    names = {f.name for f in dataclasses.fields(cls)}
    changes = {}
    for key, raw in mapping.items():
        if key not in names:
            raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
        current = getattr(base, key)
        if key == "levels_enabled":
            current = ()
        if key == "max_steps":
            current = 0
        changes[key] = parse_value(raw, current) if isinstance(raw, str) else raw
    return dataclasses.replace(base, **changes)


def load_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out
