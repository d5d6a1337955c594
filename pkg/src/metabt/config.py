"""Flat key = value experiment configuration (TOML syntax, no tables).

Every key is typed; unknown keys, wrong types and inconsistent values are
rejected before any command touches the file system.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass, fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .autodiff import ContractError
from .datasynth import FIRST_CONTENT
from .metatrain import GenerationStrategy, Hyperparams
from .seq2seq import NoiseConfig


class ConfigError(ContractError):
    pass


STRATEGIES = ("none", "beam", "sample", "noisy_beam", "meta")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    # task
    content_vocab: int = 60
    window: int = 2
    min_length: int = 3
    max_length: int = 8
    zipf: float = 1.0
    related: bool = True
    overlap: float = 0.5
    # split sizes
    parallel_train: int = 200
    high_resource_train: int = 2000
    meta_dev: int = 100
    valid: int = 100
    test: int = 200
    mono_target: int = 0          # 0 with a related task: reuse its target side
    # strategy
    strategy: str = "meta"
    top_k: int = 10
    beam_size: int = 4
    noise_delete: float = 0.1
    noise_replace: float = 0.1
    noise_window: int = 3
    # optimisation
    lr_forward: float = 3e-3
    lr_backward: float = 3e-4
    lr_pretrain: float = 3e-3
    optimizer: str = "adam"
    backward_optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: int = 32
    max_len: int = 10
    parallel_batch: int = 32
    mono_batch: int = 16
    dev_batch: int = 32
    pretrain_batch: int = 32
    temperature: float = 1.0
    baseline_decay: float = 0.99
    use_baseline: bool = True
    total_steps: int = 600
    pretrain_steps: int = 1500
    eval_every: int = 100
    checkpoint_every: int = 100
    parallel_weight: float = 1.0
    phase1_mode: str = "sum"
    reward_mode: str = "batch"
    reward_grad: str = "raw"
    pretrain_union: bool = True
    # evaluation
    bootstrap_resamples: int = 2000

    # ------------------------------------------------------------------

    @property
    def vocab_size(self) -> int:
        return FIRST_CONTENT + self.content_vocab

    @property
    def model_vocab(self) -> int:
        """Vocabulary shared by both models: low-resource ids plus the ids
        re-keyed for the related language."""
        if not self.related:
            return self.vocab_size
        moved = self.content_vocab - int(math.floor(self.overlap * self.content_vocab + 0.5))
        return self.vocab_size + moved

    def split_sizes(self) -> dict[str, int]:
        return {"parallel_train": self.parallel_train, "meta_dev": self.meta_dev, "valid": self.valid,
                "test": self.test, "mono_target": self.mono_target}

    def hyperparams(self) -> Hyperparams:
        names = {f.name for f in fields(Hyperparams)}
        return Hyperparams(**{k: getattr(self, k) for k in names if hasattr(self, k)})

    def generation_strategy(self) -> GenerationStrategy | None:
        if self.strategy == "none":
            return None
        noise = NoiseConfig(self.noise_delete, self.noise_replace, self.noise_window)
        return GenerationStrategy(self.strategy, top_k=self.top_k, beam_size=self.beam_size, noise=noise)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes).validate()

    def validate(self) -> "ExperimentConfig":
        if self.content_vocab < 1:
            raise ConfigError("content_vocab must be >= 1")
        if not 1 <= self.min_length <= self.max_length:
            raise ConfigError("need 1 <= min_length <= max_length")
        if self.max_len < self.max_length:
            raise ConfigError("max_len (decoder limit) must be >= max_length of the task")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError(f"overlap must lie in [0, 1], got {self.overlap}")
        if self.zipf < 0:
            raise ConfigError("zipf exponent must be non-negative")
        for k in ("parallel_train", "meta_dev", "valid", "test"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be >= 1")
        if self.related and self.high_resource_train < 1:
            raise ConfigError("high_resource_train must be >= 1 with a related task")
        if self.mono_target < 0 or (self.mono_target == 0 and not self.related):
            raise ConfigError("mono_target must be >= 1 without a related task")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if self.total_steps and self.eval_every > self.total_steps:
            raise ConfigError("eval_every must not exceed total_steps")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.bootstrap_resamples < 1000:
            raise ConfigError("bootstrap_resamples must be >= 1000")
        if self.top_k > self.model_vocab - 2:
            raise ConfigError("top_k exceeds the number of emittable tokens")
        try:
            self.hyperparams().validate()
            self.generation_strategy()
        except ContractError as e:
            raise ConfigError(str(e)) from None
        return self

    # ------------------------------------------------------------------
    # serialisation

    def to_toml(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                text = "true" if v else "false"
            elif isinstance(v, str):
                text = json.dumps(v)
            else:
                text = repr(v)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_toml().encode()).hexdigest()

    @classmethod
    def from_mapping(cls, raw: dict) -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(raw) - set(types))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        for k, v in raw.items():
            values[k] = _coerce(k, types[k], v)
        return cls(**values).validate()

    @classmethod
    def from_toml(cls, text: str) -> "ExperimentConfig":
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"malformed config: {e}") from None
        return cls.from_mapping(raw)

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        return cls.from_toml(text)


def _coerce(key: str, typ: str, v):
    if typ == "bool":
        if not isinstance(v, bool):
            raise ConfigError(f"{key} must be true or false")
        return v
    if typ == "int":
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{key} must be an integer")
        return v
    if typ == "float":
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(v)
    if typ == "str":
        if not isinstance(v, str):
            raise ConfigError(f"{key} must be a string")
        return v
    raise ConfigError(f"{key} has unsupported type {typ}")
