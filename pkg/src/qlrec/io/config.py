"""Run configuration with dotted keys (``model.d_model``, ``train.lr`` ...).

A :class:`RunConfig` starts from defaults, is updated from a JSON or YAML
file and then from command-line overrides; the resolved values are written
next to a run's outputs so the run can be repeated.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from ..lora import InjectionSpec
from ..model import TransformerConfig
from ..quantizer import QuantizeConfig
from ..trainer import LossConfig, OptimConfig

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "model": {"n_layers": 2, "d_model": 128, "n_heads": 4, "d_ff": 344, "ctx_len": 128, "seed": 0},
    "quant": {"bits": 4, "group_size": 16, "act_order": True, "true_sequential": True,
              "percdamp": 0.01, "calib_samples": 128, "method": "gptq"},
    "lora": {"targets": "q,v", "r": 8, "alpha": 16.0, "dropout_p": 0.05},
    "train": {"learning_rate": 3e-4, "weight_decay": 0.0, "batch_size": 16, "micro_batch_size": 16,
              "epochs": 1, "grad_clip": None, "steps": 3000, "lambda_kl": 1.0, "lambda_ce": None,
              "calib_n": 2000, "val_every": 50, "mask_prompt": True, "cache_teacher": False},
    "eval": {"stride": None, "dataset": "test", "max_tokens": 65536, "n_prompts": 32},
}

ConfigSource = Union[str, Path, Mapping[str, Any], None]


class ConfigError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0])


def valid_keys() -> list:
    return sorted(f"{s}.{k}" for s, sec in DEFAULTS.items() for k in sec)


def _coerce(key: str, default: Any, value: Any) -> Any:
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if isinstance(value, str):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: cannot read {value!r} as a boolean")
        return bool(value)
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, str) and isinstance(value, (list, tuple)):
        return ",".join(value)
    return value


def _flatten(d: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def read_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return _flatten(data)


class RunConfig:
    """Resolved configuration values keyed by ``section.name``."""

    def __init__(self, values: Optional[Mapping[str, Any]] = None, seed: int = 0):
        self.sections = copy.deepcopy(DEFAULTS)
        self.seed = seed
        if values:
            self.update(values)

    def __getitem__(self, key: str) -> Any:
        sec, name = self._split(key)
        return self.sections[sec][name]

    def __setitem__(self, key: str, value: Any) -> None:
        sec, name = self._split(key)
        self.sections[sec][name] = _coerce(key, DEFAULTS[sec][name], value)

    def _split(self, key: str):
        sec, _, name = key.partition(".")
        if sec not in DEFAULTS or name not in DEFAULTS[sec]:
            raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(valid_keys())}")
        return sec, name

    def update(self, values: Mapping[str, Any]) -> "RunConfig":
        for k, v in _flatten(values).items():
            if k == "seed":
                self.seed = int(v)
            else:
                self[k] = v
        return self

    @classmethod
    def resolve(cls, source: ConfigSource = None, overrides: Optional[Mapping[str, Any]] = None,
                seed: Optional[int] = None) -> "RunConfig":
        """Defaults, then ``source`` (file path or mapping), then ``overrides``, then ``seed``."""
        cfg = cls()
        if source is not None:
            cfg.update(read_file(source) if isinstance(source, (str, Path)) else source)
        if overrides:
            cfg.update({k: v for k, v in overrides.items() if v is not None})
        if seed is not None:
            cfg.seed = int(seed)
        return cfg

    def to_dict(self) -> Dict[str, Any]:
        d: Dict[str, Any] = copy.deepcopy(self.sections)
        d["seed"] = self.seed
        return d

    def write_snapshot(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    # -- typed views ---------------------------------------------------------

    def model_config(self) -> TransformerConfig:
        return TransformerConfig(**self.sections["model"])

    def quant_config(self) -> QuantizeConfig:
        return QuantizeConfig(seed=self.seed, **self.sections["quant"])

    def injection_spec(self) -> InjectionSpec:
        return InjectionSpec(**self.sections["lora"])

    def optim_config(self) -> OptimConfig:
        t = self.sections["train"]
        return OptimConfig(learning_rate=t["learning_rate"], weight_decay=t["weight_decay"],
                           batch_size=t["batch_size"], micro_batch_size=t["micro_batch_size"],
                           epochs=t["epochs"], seed=self.seed, grad_clip=t["grad_clip"])

    def loss_config(self) -> LossConfig:
        t = self.sections["train"]
        if t["lambda_ce"] is None:
            return LossConfig(lambda_kl=t["lambda_kl"], lambda_ce=LossConfig.preset(self["quant.bits"]).lambda_ce)
        return LossConfig(lambda_kl=t["lambda_kl"], lambda_ce=t["lambda_ce"])

