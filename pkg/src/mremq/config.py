"""Flat ``key = value`` run configuration.

Precedence: command-line flag > config file > built-in default. The effective
configuration is written back out as ``config.echo`` in the run directory.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from .model import Bits, ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    layers: int = 8
    d_model: int = 32
    heads: int = 2
    d_ff: int = 64
    vocab: int = 64
    max_seq_len: int = 16
    num_classes: int = 2
    # data
    num_train: int = 8192
    num_held: int = 2048
    calib_size: int = 4096
    # full-precision fine-tuning
    fp_steps: int = 1500
    fp_lr: float = 2e-3
    fp_batch_size: int = 64
    # quantization
    method: str = "mrem-p"
    mode: str = "lockstep"
    bits: str = "2,2,8"
    modules: int = 4
    steps: int = 2000
    lr: float = 1e-4
    batch_size: int = 32
    t0: int = 4
    tf_fraction: float = 0.4
    teacher_forcing: bool = True
    rem_steps: int = 200
    qat_steps: int = 2000
    qat_lr: float = 1e-4
    pcq: bool = False
    seed: int = 0
    # simulate-speedup
    micro_batches: int = 4

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.layers, self.d_model, self.heads, self.d_ff, self.vocab,
                           self.max_seq_len, self.num_classes)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps, lr=self.lr, batch_size=self.batch_size, bits=Bits.parse(self.bits),
            modules=self.modules, t0=self.t0, tf_fraction=self.tf_fraction,
            teacher_forcing=self.teacher_forcing, rem_steps=self.rem_steps,
            qat_steps=self.qat_steps, qat_lr=self.qat_lr, pcq=self.pcq, seed=self.seed,
        )

    def echo(self) -> str:
        return "".join(f"{k} = {_show(v)}\n" for k, v in dataclasses.asdict(self).items())


KEYS = {f.name: f for f in fields(RunConfig)}


def _show(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, raw: Any):
    typ = KEYS[key].type
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if typ in ("bool", bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    out = {}
    for i, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{i}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in KEYS:
            raise ConfigError(f"{source}:{i}: unknown key {k!r}")
        out[k] = _coerce(k, v)
    return out


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    values: Dict[str, Any] = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in KEYS:
            raise ConfigError(f"unknown key {k!r}")
        values[k] = _coerce(k, v)
    cfg = RunConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.method not in ("rem", "mrem-s", "mrem-p", "qat"):
        raise ConfigError(f"unknown method {cfg.method!r}")
    if cfg.mode not in ("lockstep", "threads"):
        raise ConfigError(f"unknown mode {cfg.mode!r}")
    try:
        cfg.model_config()
        cfg.train_config()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if not 0 < cfg.calib_size <= cfg.num_train:
        raise ConfigError(f"calib_size must lie in 1..{cfg.num_train}")
    if cfg.modules > cfg.layers:
        raise ConfigError(f"modules ({cfg.modules}) exceeds layers ({cfg.layers})")
