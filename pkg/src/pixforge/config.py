"""Run configuration as flat ``key = value`` text with dotted keys.

Key names and defaults follow the usual DDPO training configuration; keys under
``world``, ``reward``, ``model`` and ``pretrain`` are local to this
package. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class SampleConfig:
    num_steps: int = 50
    eta: float = 1.0
    guidance_scale: float = 5.0
    batch_size: int = 1
    num_batches_per_epoch: int = 2


@dataclass
class TrainConfig:
    batch_size: int = 1
    use_8bit_adam: bool = False
    learning_rate: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_weight_decay: float = 1e-4
    adam_epsilon: float = 1e-8
    gradient_accumulation_steps: int = 1
    max_grad_norm: float = 1.0
    num_inner_epochs: int = 1
    cfg: bool = True
    adv_clip_max: float = 5.0
    clip_range: float = 1e-4
    timestep_fraction: float = 1.0


@dataclass
class StatTrackingConfig:
    buffer_size: int = 16
    min_count: int = 16


@dataclass
class WorldConfig:
    size: int = 16
    max_tokens: int = 8
    difficulty: str = "single"
    # 0 draws fresh triples every epoch; N > 0 cycles through seeds 0..N-1
    train_pool: int = 0
    holdout_start: int = 1_000_000
    holdout_count: int = 16


@dataclass
class RewardConfig:
    tau: float = 0.05
    alpha: float = -1.0
    use_attention: bool = True
    attention_source: str = "policy"


@dataclass
class ModelConfig:
    patch: int = 4
    width: int = 32
    heads: int = 2
    blocks: int = 2
    lora_rank: int = 4
    lora_scale: float = 1.0
    num_train_timesteps: int = 100


@dataclass
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 16
    learning_rate: float = 1e-3
    cond_dropout: float = 0.1


@dataclass
class RunConfig:
    seed: int = 42
    logdir: str = "logs"
    num_epochs: int = 200
    save_freq: int = 50
    num_checkpoint_limit: int = 5
    mixed_precision: str = "no"
    allow_tf32: bool = True
    resume_from: str = ""
    use_lora: bool = True
    pretrained_checkpoint: str = ""
    sample: SampleConfig = field(default_factory=SampleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    per_prompt_stat_tracking: StatTrackingConfig = field(default_factory=StatTrackingConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def flat(self) -> dict[str, Any]:
        return flatten(self)

    def replace(self, **dotted) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``cfg.replace(**{"train.clip_range": 0.2})``."""
        values = self.flat()
        for k, v in dotted.items():
            if k not in values:
                raise ConfigError(f"unknown config key {k!r}")
            values[k] = v
        return from_flat(values)


DESK_OVERRIDES: dict[str, Any] = {
    "num_epochs": 60,
    "save_freq": 10,
    "sample.num_steps": 10,
    "sample.batch_size": 16,
    "sample.num_batches_per_epoch": 4,
    "train.batch_size": 16,
    "train.learning_rate": 1e-3,
    "train.clip_range": 0.2,
    "world.train_pool": 16,
}


def desk_profile() -> RunConfig:
    """Laptop-scale profile: 16x16 world, 10 sampler steps, 60 epochs.

    A 64-trajectory epoch over a fixed pool of 16 prompts, with a wider
    clip range and larger step than the full-size defaults, so that a
    minute of CPU time moves the policy measurably.
    """
    return RunConfig().replace(**DESK_OVERRIDES)


def full_profile() -> RunConfig:
    """Full-size defaults: 50 sampler steps, 200 epochs, batch 1, clip range 1e-4."""
    return RunConfig()


def flatten(cfg, prefix: str = "") -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _field_types(cls, prefix: str = "") -> dict[str, type]:
    out = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for name, f in hints.items():
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            out.update(_field_types(type(default), prefix + name + "."))
        else:
            out[prefix + name] = type(default)
    return out


FIELD_TYPES = _field_types(RunConfig)


def _coerce(key: str, value: Any) -> Any:
    want = FIELD_TYPES[key]
    if want is bool:
        if isinstance(value, bool):
            return value
    elif want is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif want is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif want is str:
        if isinstance(value, str):
            return value
    raise ConfigError(f"{key}: expected {want.__name__}, got {value!r}")


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.mixed_precision != "no":
        raise ConfigError("mixed_precision: only 'no' is supported")
    if cfg.train.use_8bit_adam:
        raise ConfigError("train.use_8bit_adam: only false is supported")
    if not cfg.train.clip_range > 0:
        raise ConfigError("train.clip_range must be positive")
    if not cfg.train.adv_clip_max > 0:
        raise ConfigError("train.adv_clip_max must be positive")
    if not 0 < cfg.train.timestep_fraction <= 1:
        raise ConfigError("train.timestep_fraction must lie in (0, 1]")
    if not 0 < cfg.sample.eta <= 1:
        raise ConfigError("sample.eta must lie in (0, 1]; RL needs stochastic transitions")
    if cfg.sample.guidance_scale < 1:
        raise ConfigError("sample.guidance_scale must be >= 1")
    if cfg.reward.attention_source not in ("policy", "frozen_reference"):
        raise ConfigError("reward.attention_source must be 'policy' or 'frozen_reference'")
    if cfg.world.difficulty not in ("single", "multi-object"):
        raise ConfigError("world.difficulty must be 'single' or 'multi-object'")
    for key in ("num_epochs", "save_freq", "num_checkpoint_limit", "sample.num_steps",
                "sample.batch_size", "sample.num_batches_per_epoch", "train.batch_size",
                "train.gradient_accumulation_steps", "train.num_inner_epochs",
                "per_prompt_stat_tracking.buffer_size"):
        v = cfg.flat()[key]
        if v < (0 if key == "num_epochs" else 1):
            raise ConfigError(f"{key} must be positive, got {v}")
    return cfg


def from_flat(values: dict[str, Any]) -> RunConfig:
    base = RunConfig()
    sections: dict[str, dict[str, Any]] = {}
    top: dict[str, Any] = {}
    for key, value in values.items():
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        value = _coerce(key, value)
        if "." in key:
            sec, name = key.split(".", 1)
            sections.setdefault(sec, {})[name] = value
        else:
            top[key] = value
    for sec, kv in sections.items():
        top[sec] = dataclasses.replace(getattr(base, sec), **kv)
    return validate(dataclasses.replace(base, **top))


def _parse_value(text: str, where: str) -> Any:
    text = text.strip()
    if text in ("true", "True"):
        return True
    if text in ("false", "False"):
        return False
    if text[:1] in "\"'":
        if text[0] == "'" and text.endswith("'"):
            return text[1:-1]
        try:
            return json.loads(text)
        except json.JSONDecodeError:
            raise ConfigError(f"{where}: bad string {text!r}") from None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse value {text!r}") from None


def parse(text: str, base: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    """Parse ``key = value`` lines over ``base`` (defaults if None)."""
    values = (base or RunConfig()).flat()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = _strip_comment(line).strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in stripped.split("=", 1))
        key = key.removeprefix("config.")
        if key not in FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = _parse_value(value, f"{source}:{lineno}")
    return from_flat(values)


def _strip_comment(line: str) -> str:
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def load(path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse(path.read_text(), base, str(path))


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else ("inf" if value > 0 else "-inf")
    return str(value)


def manifest(cfg: RunConfig, extra: dict[str, Any] | None = None) -> str:
    """Every resolved value, one ``key = value`` line each."""
    lines = [f"{k} = {_format(v)}" for k, v in cfg.flat().items()]
    for k, v in (extra or {}).items():
        lines.append(f"# {k} = {v}")
    return "\n".join(lines) + "\n"


def resolve_logdir(cfg: RunConfig) -> str:
    return os.environ.get("PIXFORGE_LOGDIR") or cfg.logdir
