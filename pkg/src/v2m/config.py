"""Run configuration with layered overrides.

Values resolve in precedence order: command-line flags, then V2M_*
environment variables, then a JSON config file, then defaults. Config
file keys mirror RunConfig field names exactly; unknown keys are
rejected up front so typos fail loudly instead of silently using a
default.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .model import ModelConfig
from .postprocess import REGRESSOR_KINDS, RegressorConfig
from .theory import parse_key
from .training import LossWeights, OptimizerSpec

ENV_PREFIX = "V2M_"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    epochs: int = 10
    batch_size: int = 16
    t_max: int = 300
    d_model: int = 512
    n_heads: int = 8
    n_layers: int = 6
    d_ff: int = 2048
    max_rel_dist: int = 300
    dropout: float = 0.1
    lr: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    warmup_steps: int = 4000
    lambda_weight: float = 0.4
    regressor_kind: str = "bigru"
    regressor_hidden: int = 64
    regressor_layers: int = 2
    key: str = "C:major"
    test_mode: bool = False

    def validate(self) -> None:
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.t_max < 1:
            raise ConfigError(f"t_max must be >= 1, got {self.t_max}")
        if not 0.0 <= self.lambda_weight <= 1.0:
            raise ConfigError(f"lambda_weight must be in [0, 1], got {self.lambda_weight}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}"
            )
        if self.regressor_kind not in REGRESSOR_KINDS:
            raise ConfigError(
                f"regressor_kind must be one of {REGRESSOR_KINDS}, got {self.regressor_kind!r}"
            )
        try:
            parse_key(self.key)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def model_config(self, d_sem: int, max_len: int | None = None) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_layers_enc=self.n_layers,
            n_layers_dec=self.n_layers,
            d_ff=self.d_ff,
            d_sem=d_sem,
            max_len=max_len if max_len is not None else self.t_max,
            max_rel_dist=self.max_rel_dist,
            dropout=self.dropout,
        )

    def optimizer_spec(self) -> OptimizerSpec:
        return OptimizerSpec(
            base_lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            warmup_steps=self.warmup_steps,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_weight=self.lambda_weight)

    def regressor_config(self, input_dim: int) -> RegressorConfig:
        return RegressorConfig(
            kind=self.regressor_kind,
            input_dim=input_dim,
            hidden=self.regressor_hidden,
            layers=self.regressor_layers,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw, source: str):
    kind = _FIELD_TYPES[name]
    if kind == "bool":
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{source}: {name} must be a boolean, got {raw!r}")
    try:
        if kind == "int":
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError
            return int(raw)
        if kind == "float":
            return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{source}: {name} must be a {kind}, got {raw!r}") from None
    return str(raw)


def load_config_file(path) -> dict:
    """Read a JSON config file; every key must name a RunConfig field."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config file must hold a JSON object")
    unknown = [key for key in doc if key not in _FIELD_TYPES]
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {unknown}")
    return {key: _coerce(key, value, str(path)) for key, value in doc.items()}


def env_overrides(environ=None) -> dict:
    """Collect V2M_<FIELD> values for every RunConfig field."""
    environ = os.environ if environ is None else environ
    out = {}
    for name in _FIELD_TYPES:
        raw = environ.get(ENV_PREFIX + name.upper())
        if raw is not None:
            out[name] = _coerce(name, raw, f"environment {ENV_PREFIX}{name.upper()}")
    return out


def resolve_config(flag_values: dict | None = None, config_path=None,
                   environ=None) -> RunConfig:
    """Merge defaults, config file, environment, and flags, then validate.

    flag_values maps RunConfig field names to values; None entries mean
    the flag was not given.
    """
    merged: dict = {}
    if config_path is not None:
        merged.update(load_config_file(config_path))
    merged.update(env_overrides(environ))
    for name, value in (flag_values or {}).items():
        if value is None:
            continue
        if name not in _FIELD_TYPES:
            raise ConfigError(f"unknown config field from flags: {name!r}")
        merged[name] = _coerce(name, value, f"flag {name}")
    config = RunConfig(**merged)
    config.validate()
    return config
