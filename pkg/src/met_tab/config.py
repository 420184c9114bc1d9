"""Experiment configuration, presets and the key = value config format."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .backbone import ModelConfig
from .downstream import HeadConfig
from .trainer import TrainConfig, masked_count

VERSION = "met-tab 0.1.0"
BASELINES = ("none", "met-r", "rfg", "raw-mlp")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Everything a run needs; ``d`` is taken from the data at run time."""

    dataset: str = "toy"                 # "toy" or a CSV path
    schema: str | None = None
    split_file: str | None = None
    test_fraction: float = 0.5
    n_per_class: int = 5000
    normalize: str = "auto"              # auto | zscore | minmax | none
    data_seed: int = 0
    # backbone
    e: int = 64
    fw: int = 64
    heads: int = 1
    enc_depth: int = 1
    dec_depth: int = 1
    mask_token_mode: str = "shared"
    # pretraining
    epochs: int = 100
    batch_size: int = 64
    mask_pct: float = 70.0
    epsilon: float = 2.0
    lam: float = 1.0
    adv_steps: int = 2
    ascent_lr: float = 1e-2
    descent_lr: float = 1e-4
    optimizer: str = "adam"
    variant: str = "met"
    checkpoint_every: int = 0
    # downstream
    mode: str = "concat"
    label_fraction: float = 1.0
    baseline: str = "none"
    head_depth: int = 2
    head_width: int = 0                  # 0 -> min(256, representation width)
    head_epochs: int = 100
    head_lr: float = 1e-3
    head_batch_size: int = 128
    seed: int = 0
    seeds: list[int] = field(default_factory=list)
    out: str = "runs/latest"

    def validate(self, d: int | None = None) -> None:
        if self.mode not in ("concat", "average"):
            raise ConfigError(f"mode must be concat or average, got {self.mode!r}")
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}")
        if self.normalize not in ("auto", "zscore", "minmax", "none"):
            raise ConfigError(f"unknown normalize option {self.normalize!r}")
        if not 0 < self.label_fraction <= 1:
            raise ConfigError("label_fraction must lie in (0, 1]")
        try:
            self.train_config()
            self.head_config()
            if d is not None:
                self.model_config(d)
                masked_count(d, self.mask_pct)
        except ValueError as err:
            raise ConfigError(str(err)) from None

    def model_config(self, d: int) -> ModelConfig:
        return ModelConfig(d=d, e=self.e, fw=self.fw, heads=self.heads, enc_depth=self.enc_depth,
                           dec_depth=self.dec_depth, mask_token_mode=self.mask_token_mode)

    def train_config(self, seed: int | None = None, **overrides) -> TrainConfig:
        kw = dict(mask_pct=self.mask_pct, epsilon=self.epsilon, lam=self.lam, adv_steps=self.adv_steps,
                  ascent_lr=self.ascent_lr, descent_lr=self.descent_lr, epochs=self.epochs,
                  batch_size=self.batch_size, seed=self.seed if seed is None else seed,
                  optimizer=self.optimizer, variant=self.variant, checkpoint_every=self.checkpoint_every)
        kw.update(overrides)
        return TrainConfig(**kw)

    def head_config(self, seed: int | None = None, **overrides) -> HeadConfig:
        kw = dict(hidden_layers=self.head_depth, hidden_width=self.head_width or None, lr=self.head_lr,
                  epochs=self.head_epochs, batch_size=self.head_batch_size,
                  seed=self.seed if seed is None else seed)
        kw.update(overrides)
        return HeadConfig(**kw)

    def seed_list(self) -> list[int]:
        return list(self.seeds) or [self.seed]

    # -- text form ---------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, list):
                v = ",".join(str(s) for s in v)
            lines.append(f"{f.name.replace('_', '-')} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def update(self, values: dict) -> "ExperimentConfig":
        """Apply string or typed values keyed by field name (dashes allowed)."""
        types = {f.name: f.type for f in fields(self)}
        for raw_key, raw in values.items():
            key = raw_key.replace("-", "_")
            if key == "lambda":
                key = "lam"
            if key not in types:
                raise ConfigError(f"unknown config key {raw_key!r}")
            setattr(self, key, _coerce(key, types[key], raw))
        return self


def _coerce(key: str, typ: str, raw):
    if not isinstance(raw, str):
        if key == "seeds":
            return [int(s) for s in raw]
        if typ.startswith("float") and isinstance(raw, (int, float)):
            return float(raw)
        return raw
    raw = raw.strip()
    try:
        if key == "seeds":
            return [int(s) for s in raw.split(",") if s.strip()]
        if typ.startswith("int"):
            return int(raw)
        if typ.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    if typ.startswith("str | None") and raw.lower() in ("", "none"):
        return None
    return raw


def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


# Architecture and optimization settings per dataset. The "Adversarial lr"
# column is the ascent step and "lr" the descent step.
PRESETS: dict[str, dict] = {
    "fmnist": dict(e=64, fw=64, heads=1, enc_depth=6, dec_depth=1,
                   descent_lr=1e-5, mask_pct=70, adv_steps=2, epsilon=2, ascent_lr=1e-2),
    # heads=1 instead of 2: a token width of e+1=101 cannot be split into 2 heads
    "cifar10": dict(e=100, fw=64, heads=1, enc_depth=3, dec_depth=3,
                    descent_lr=1e-4, mask_pct=70, adv_steps=3, epsilon=14, ascent_lr=1e-2),
    "mnist": dict(e=64, fw=64, heads=1, enc_depth=6, dec_depth=1,
                  descent_lr=1e-4, mask_pct=70, adv_steps=2, epsilon=12, ascent_lr=1e-2),
    "covtype": dict(e=100, fw=64, heads=1, enc_depth=1, dec_depth=1,
                    descent_lr=1e-4, mask_pct=50, adv_steps=5, epsilon=4, ascent_lr=1e-1),
    "income": dict(e=64, fw=64, heads=1, enc_depth=3, dec_depth=6,
                   descent_lr=1e-3, mask_pct=80, adv_steps=1, epsilon=6, ascent_lr=1e-1),
    # desk-scale settings for the two-circles data; not taken from any table
    "toy": dict(dataset="toy", n_per_class=5000, e=8, fw=16, heads=1, enc_depth=2, dec_depth=1,
                mask_pct=50, adv_steps=2, epsilon=2, ascent_lr=1e-2, descent_lr=1e-3, epochs=100),
}


def from_preset(name: str | None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if name is None:
        return cfg
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return cfg.update(PRESETS[name])
