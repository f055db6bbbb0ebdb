"""
Experiment configuration: one YAML file of flat dotted keys.

Example::

    seed: 0
    data.dir: runs/data
    train.epochs: 150

Unknown keys, wrong types and out-of-range values are rejected before any
command does work.  Defaults are the desk-scale values; ``configs/fullscale.yaml``
lists the full-scale ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import yaml

from .trainer import MRTrainConfig, TrainConfig, derive_seed


class ConfigError(ValueError):
    pass


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _unit(x):
    return 0.0 <= x <= 1.0


@dataclass(frozen=True)
class Key:
    name: str
    type: type
    default: Any
    check: Callable | None
    doc: str
    nullable: bool = False


KEYS = [
    Key("seed", int, 0, _nonneg, "root seed; data/init/time/mr streams are derived from it"),
    Key("data.dir", str, "runs/data", None, "directory holding the train/val/test splits"),
    Key("data.n_train", int, 512, _pos, "training examples"),
    Key("data.n_val", int, 64, _pos, "validation examples"),
    Key("data.n_test", int, 64, _pos, "test examples"),
    Key("data.duration_s", float, 1.0, _pos, "clip length in seconds"),
    Key("data.sample_rate", int, 8000, _pos, "sample rate in Hz"),
    Key("data.lambda_lo", float, 0.3, _unit, "lower end of the uniform mixing-ratio range"),
    Key("data.lambda_hi", float, 0.7, _unit, "upper end of the uniform mixing-ratio range"),
    Key("stft.window_len", int, 64, _pos, "STFT window length (samples)"),
    Key("stft.hop", int, 16, _pos, "STFT hop (samples)"),
    Key("features.n_bands", int, None, _pos, "enrollment bands; null = one per STFT bin", True),
    Key("net.hidden", int, 128, _pos, "hidden width of the velocity MLP"),
    Key("net.n_layers", int, 3, _pos, "hidden layers of the velocity MLP"),
    Key("net.time_dim", int, 16, lambda x: x > 0 and x % 2 == 0, "sinusoidal embedding size for t and r"),
    Key("net.context", int, 0, _nonneg, "neighbouring frames concatenated on each side"),
    Key("run.dir", str, "runs/model", None, "output directory for logs and checkpoints"),
    Key("train.epochs", int, 150, _pos, "training epochs"),
    Key("train.batch_size", int, 16, _pos, "examples per update"),
    Key("train.base_lr", float, 1e-3, _pos, "peak learning rate"),
    Key("train.min_lr", float, 1e-4, _pos, "cosine floor"),
    Key("train.warmup_epochs", float, 2.0, _nonneg, "linear warmup length"),
    Key("train.cosine_T_max", float, None, _pos, "cosine period in epochs; null = epochs - warmup", True),
    Key("train.cosine_restart", bool, True, None, "restart the cosine after each period (else clamp)"),
    Key("train.weight_decay", float, 0.01, _nonneg, "AdamW decoupled weight decay"),
    Key("train.clip_threshold", float, 0.5, _pos, "global gradient-norm clip"),
    Key("train.beta1", float, 0.9, lambda x: 0 <= x < 1, "Adam first-moment decay"),
    Key("train.beta2", float, 0.999, lambda x: 0 <= x < 1, "Adam second-moment decay"),
    Key("train.adam_eps", float, 1e-8, _pos, "Adam epsilon"),
    Key("train.crop_frames", int, 128, _nonneg, "random contiguous frame crop per example; 0 = all"),
    Key("train.val_every", int, 5, _pos, "validate every N epochs"),
    Key("train.val_lambda", str, "oracle", lambda x: x in ("oracle", "predicted"),
        "lambda used for checkpoint selection"),
    Key("curriculum.k_s_epochs", float, 0.0, _nonneg, "alpha transition start (epochs)"),
    Key("curriculum.k_e_epochs", float, None, _pos, "alpha transition end (epochs); null = train.epochs", True),
    Key("curriculum.gamma", float, 25.0, _pos, "sigmoid steepness"),
    Key("curriculum.alpha_min", float, 0.005, lambda x: 0 < x <= 1, "alpha floor"),
    Key("time.mu", float, -0.4, None, "location of the normal before the logistic"),
    Key("time.sigma", float, 1.0, _pos, "scale of the normal before the logistic"),
    Key("time.flow_ratio", float, 0.5, _unit, "probability an update uses t == r"),
    Key("time.family", str, "logit_normal", lambda x: x in ("logit_normal", "lognormal_clip"),
        "time distribution family"),
    Key("loss.c", float, 1e-3, _pos, "adaptive weight offset"),
    Key("mr.epochs", int, 150, _pos, "MR predictor epochs"),
    Key("mr.batch_size", int, 32, _pos, "MR predictor batch size"),
    Key("mr.lr", float, 3e-3, _pos, "MR predictor learning rate"),
    Key("mr.weight_decay", float, 1e-4, _nonneg, "MR predictor weight decay"),
    Key("mr.hidden", int, 64, _pos, "MR MLP width"),
    Key("mr.n_layers", int, 2, _pos, "MR MLP depth"),
    Key("infer.clip_lo", float, 0.05, _unit, "lower clip for predicted lambda"),
    Key("infer.clip_hi", float, 0.95, _unit, "upper clip for predicted lambda"),
    Key("eval.split", str, "test", lambda x: x in ("train", "val", "test"), "split scored by eval"),
]
KEY_MAP = {k.name: k for k in KEYS}
SPLITS = ("train", "val", "test")


def _coerce(key: Key, value):
    if value is None:
        if key.nullable:
            return None
        raise ConfigError(f"{key.name} may not be null")
    if key.type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key.name} must be true/false")
        return value
    if key.type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key.name} must be an integer, got {value!r}")
        return value
    if key.type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key.name} must be a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key.name} must be a string, got {value!r}")
    return value


class ExperimentConfig:
    """Validated flat key -> value mapping with builders for the per-module configs."""

    def __init__(self, values: dict | None = None, base_dir: Path | None = None):
        self.base_dir = Path(base_dir) if base_dir else Path.cwd()
        self.values = {k.name: k.default for k in KEYS}
        for name, value in (values or {}).items():
            if name not in KEY_MAP:
                raise ConfigError(f"unknown config key {name!r}")
            key = KEY_MAP[name]
            v = _coerce(key, value)
            if v is not None and key.check is not None and not key.check(v):
                raise ConfigError(f"{name}={v!r} out of range")
            self.values[name] = v
        self._cross_check()

    def _cross_check(self):
        v = self.values
        if v["data.lambda_lo"] > v["data.lambda_hi"]:
            raise ConfigError("data.lambda_lo must not exceed data.lambda_hi")
        if v["train.min_lr"] > v["train.base_lr"]:
            raise ConfigError("train.min_lr must not exceed train.base_lr")
        if v["stft.hop"] > v["stft.window_len"]:
            raise ConfigError("stft.hop must not exceed stft.window_len")
        if int(round(v["data.duration_s"] * v["data.sample_rate"])) < v["stft.window_len"]:
            raise ConfigError("clips are shorter than the STFT window")
        if v["infer.clip_lo"] >= v["infer.clip_hi"]:
            raise ConfigError("infer.clip_lo must be below infer.clip_hi")
        if v["curriculum.k_e_epochs"] is not None and v["curriculum.k_e_epochs"] <= v["curriculum.k_s_epochs"]:
            raise ConfigError("curriculum.k_e_epochs must exceed curriculum.k_s_epochs")
        self.train_config()
        self.mr_train_config()

    def __getitem__(self, name):
        return self.values[name]

    def path(self, name) -> Path:
        p = Path(self.values[name])
        return p if p.is_absolute() else self.base_dir / p

    def split_seed(self, split: str) -> int:
        return derive_seed(self["seed"], "data") + SPLITS.index(split)

    def train_config(self) -> TrainConfig:
        v = self.values
        T = v["train.cosine_T_max"]
        if T is None:
            T = max(v["train.epochs"] - v["train.warmup_epochs"], 1e-9)
        try:
            return TrainConfig(
                epochs=v["train.epochs"], batch_size=v["train.batch_size"], base_lr=v["train.base_lr"],
                min_lr=v["train.min_lr"], warmup_epochs=v["train.warmup_epochs"], cosine_T_max=T,
                cosine_restart=v["train.cosine_restart"], weight_decay=v["train.weight_decay"],
                clip_threshold=v["train.clip_threshold"], beta1=v["train.beta1"], beta2=v["train.beta2"],
                adam_eps=v["train.adam_eps"], seed=v["seed"], k_s_epochs=v["curriculum.k_s_epochs"],
                k_e_epochs=v["curriculum.k_e_epochs"], gamma=v["curriculum.gamma"],
                alpha_min=v["curriculum.alpha_min"], mu=v["time.mu"], sigma=v["time.sigma"],
                flow_ratio=v["time.flow_ratio"], time_family=v["time.family"], c=v["loss.c"],
                crop_frames=v["train.crop_frames"], val_every=v["train.val_every"],
                val_lambda=v["train.val_lambda"], hidden=v["net.hidden"], n_layers=v["net.n_layers"],
                time_dim=v["net.time_dim"], context=v["net.context"], window_len=v["stft.window_len"],
                hop=v["stft.hop"], n_bands=v["features.n_bands"])
        except ValueError as err:
            raise ConfigError(str(err)) from err

    def mr_train_config(self) -> MRTrainConfig:
        v = self.values
        try:
            return MRTrainConfig(epochs=v["mr.epochs"], batch_size=v["mr.batch_size"], lr=v["mr.lr"],
                                 weight_decay=v["mr.weight_decay"], hidden=v["mr.hidden"],
                                 n_layers=v["mr.n_layers"], seed=v["seed"],
                                 window_len=v["stft.window_len"], hop=v["stft.hop"],
                                 n_bands=v["features.n_bands"])
        except ValueError as err:
            raise ConfigError(str(err)) from err


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: {err}") from err
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping of dotted keys")
    for k, v in raw.items():
        if isinstance(v, dict):
            raise ConfigError(f"{path}: nested section {k!r}; use flat dotted keys")
    return ExperimentConfig(raw, base_dir=path.parent)


def config_reference() -> str:
    lines = ["# Configuration keys", "", "| key | type | default | description |", "|---|---|---|---|"]
    for k in KEYS:
        d = "null" if k.default is None else repr(k.default)
        lines.append(f"| `{k.name}` | {k.type.__name__} | {d} | {k.doc} |")
    return "\n".join(lines) + "\n"
