"""Flat key=value run configuration.

One option per line, ``key = value``; blank lines and ``#`` comment lines are
ignored, as is anything after `` #`` on a value line. No nesting, no
sections. Unknown keys are rejected so typos fail loudly.

Example::

    arch = GSel-4-2, GFC, ReLU, BNorm, Concat, FC-2, Softmax
    data = synth
    synth_n = 6400
    epochs = 300
    lambda = 1.0
    alpha = 1e-4
    out_dir = runs/synth
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

import numpy as np

from .data import SynthBayesNet
from .errors import ConfigError
from .training import TrainConfig

OUT_DIR_ENV = "GMLP_OUT_DIR"

_TRAIN_KEYS = {
    "epochs": int,
    "batch_size": int,
    "lambda": float,
    "alpha": float,
    "lr0": float,
    "plateau_patience": int,
    "plateau_factor": float,
    "tau_start": float,
    "tau_end": float,
    "seed": int,
    "anneal_entropy": bool,
    "anneal_temperature": bool,
    "val_fraction": float,
}

_RUN_KEYS = {
    "arch": str,
    "data": str,
    "train_csv": str,
    "test_csv": str,
    "label_column": str,
    "has_header": bool,
    "test_fraction": float,
    "branching": int,
    "out_dir": str,
    "synth_n": int,
    "synth_seed": int,
    "synth_root_prob": str,
    "synth_xor_fidelity": float,
    "synth_target_rule": str,
    "halfnoise_n": int,
    "halfnoise_signal": int,
    "halfnoise_noise": int,
    "halfnoise_classes": int,
    "halfnoise_seed": int,
}


@dataclass
class RunConfig:
    """Everything one training run needs: architecture, data source, schedule."""

    arch: str
    data: str = "synth"  # synth | csv | halfnoise
    train_csv: str = ""
    test_csv: str = ""
    label_column: str = "label"
    has_header: bool = True
    test_fraction: float = 0.2
    branching: int = 2
    out_dir: str = ""
    synth_n: int = 6400
    synth_seed: int = 0
    synth_root_prob: str = ""
    synth_xor_fidelity: float = 0.99
    synth_target_rule: str = ""
    halfnoise_n: int = 2000
    halfnoise_signal: int = 16
    halfnoise_noise: int = 16
    halfnoise_classes: int = 4
    halfnoise_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if not self.arch:
            raise ConfigError("config needs an arch")
        if self.data not in ("synth", "csv", "halfnoise"):
            raise ConfigError(f"unknown data source {self.data!r}")
        if self.data == "csv" and not self.train_csv:
            raise ConfigError("data = csv requires train_csv")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        self.train.validate()

    def synth_net(self) -> SynthBayesNet:
        kw = {"xor_fidelity": self.synth_xor_fidelity}
        if self.synth_root_prob:
            probs = _float_list(self.synth_root_prob, "synth_root_prob")
            kw["root_prob"] = np.full(6, probs[0]) if len(probs) == 1 else np.asarray(probs)
        if self.synth_target_rule:
            rule = _float_list(self.synth_target_rule, "synth_target_rule")
            kw["target_rule"] = np.asarray(rule)
        return SynthBayesNet(**kw)

    def resolve_out_dir(self) -> str:
        return self.out_dir or os.environ.get(OUT_DIR_ENV, "") or "gmlp-out"

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name == "train":
                continue
            out[f.name] = getattr(self, f.name)
        for f in fields(self.train):
            key = "lambda" if f.name == "lambda_" else f.name
            out[key] = getattr(self.train, f.name)
        return out


def _float_list(text: str, key: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"{key}: expected comma-separated floats, got {text!r}") from exc


def _parse_bool(value: str, key: str) -> bool:
    low = value.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    run_kw: dict = {}
    train_kw: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip().lower()
        value = value.split(" #", 1)[0].strip()
        if key in _TRAIN_KEYS:
            caster = _TRAIN_KEYS[key]
            dest = "lambda_" if key == "lambda" else key
            try:
                train_kw[dest] = _parse_bool(value, key) if caster is bool else caster(value)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: {key}: {exc}") from exc
        elif key in _RUN_KEYS:
            caster = _RUN_KEYS[key]
            try:
                run_kw[key] = _parse_bool(value, key) if caster is bool else caster(value)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: {key}: {exc}") from exc
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    if "arch" not in run_kw:
        raise ConfigError(f"{source}: missing required key 'arch'")
    cfg = RunConfig(train=TrainConfig(**train_kw), **run_kw)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, source=str(path))
