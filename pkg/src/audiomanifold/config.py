"""Per-command run configuration.

Each CLI command has a dataclass here. Values come from (lowest to highest
precedence) the dataclass defaults, an optional YAML/JSON config file and
command-line flags. Unknown keys are rejected and every field is validated
before any compute starts.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml


class ConfigError(ValueError):
    pass


def _require(cond: bool, msg: str, problems: list[str]) -> None:
    if not cond:
        problems.append(msg)


def _check(problems: list[str]) -> None:
    if problems:
        raise ConfigError("; ".join(problems))


@dataclass
class DspOptions:
    rate: int = 22050
    window_sec: float = 1.0
    fft: int = 2048
    hop: int = 256
    mels: int = 256
    size: int = 128
    power: float = 1.0
    log_compress: bool = True

    def validate(self, problems: list[str]) -> None:
        _require(self.rate > 0, "rate must be > 0", problems)
        _require(self.window_sec > 0, "window_sec must be > 0", problems)
        _require(self.fft >= 2 and self.hop >= 1 and self.mels >= 1, "fft >= 2, hop >= 1, mels >= 1", problems)
        _require(self.size >= 1, "size must be >= 1", problems)
        _require(self.power in (1.0, 2.0), "power must be 1 or 2", problems)
        _require(self.fft <= round(self.rate * self.window_sec), "fft longer than the analysis window", problems)

    def dsp_params(self) -> dict:
        return {"target_rate": self.rate, "window_seconds": self.window_sec, "window_length": self.fft,
                "hop_length": self.hop, "mel_bins": self.mels, "size": self.size, "power": self.power,
                "log_compress": self.log_compress}


@dataclass
class PreprocessConfig(DspOptions):
    in_dir: str = ""
    out: str = ""

    def validate(self, problems):
        super().validate(problems)
        _require(bool(self.in_dir) and bool(self.out), "--in and --out are required", problems)


@dataclass
class GenSynthConfig:
    out: str = ""
    seed: int = 0
    preset: str = "toy"  # toy | full
    n_train: Optional[int] = None
    n_val: Optional[int] = None
    n_test: Optional[int] = None
    image_size: Optional[int] = None
    n_mics: Optional[int] = None
    objects_min: Optional[int] = None
    objects_max: Optional[int] = None
    snr_db: Optional[float] = None

    def validate(self, problems):
        _require(bool(self.out), "--out is required", problems)
        _require(self.preset in ("toy", "full"), "preset must be 'toy' or 'full'", problems)
        for name in ("n_train", "n_val", "n_test", "objects_min", "objects_max"):
            v = getattr(self, name)
            _require(v is None or v >= 0, f"{name} must be >= 0", problems)
        _require(self.n_mics is None or self.n_mics >= 2, "n_mics must be >= 2", problems)

    def overrides(self) -> dict:
        keys = ("n_train", "n_val", "n_test", "image_size", "n_mics", "objects_min", "objects_max", "snr_db")
        return {k: getattr(self, k) for k in keys if getattr(self, k) is not None}


@dataclass
class TrainingOptions:
    seed: int = 0
    batch_size: int = 32
    max_steps: int = 2000
    lr: float = 1e-4
    eval_every: int = 50
    patience: int = 10
    rel_threshold: float = 1e-3

    def validate(self, problems):
        _require(self.batch_size >= 1, "batch_size must be >= 1", problems)
        _require(self.max_steps >= 1, "max_steps must be >= 1", problems)
        _require(self.lr > 0, "lr must be > 0", problems)
        _require(self.eval_every >= 1 and self.patience >= 1, "eval_every and patience must be >= 1", problems)
        _require(self.rel_threshold >= 0, "rel_threshold must be >= 0", problems)


@dataclass
class TrainVqConfig(TrainingOptions):
    manifest: str = ""
    out: str = ""
    modality: str = "depth"
    variant: str = "vq"  # vq | vae
    image_size: int = 128
    latent_size: int = 16
    num_codes: int = 64
    code_dim: int = 64
    resume: bool = False

    def validate(self, problems):
        super().validate(problems)
        _require(bool(self.manifest) and bool(self.out), "--manifest and --out are required", problems)
        _require(self.modality in ("depth", "segmentation"), "modality must be depth or segmentation", problems)
        _require(self.variant in ("vq", "vae"), "variant must be vq or vae", problems)
        _require(self.latent_size >= 1 and self.image_size % self.latent_size == 0,
                 "image_size must be a multiple of latent_size", problems)
        ratio = self.image_size // max(self.latent_size, 1)
        _require(ratio >= 2 and ratio & (ratio - 1) == 0, "image_size / latent_size must be a power of two >= 2",
                 problems)
        _require(self.num_codes >= 1 and self.code_dim >= 1, "num_codes and code_dim must be >= 1", problems)


@dataclass
class TrainAtConfig(TrainingOptions, DspOptions):
    manifest: str = ""
    manifold: str = ""
    out: str = ""
    latent_size: Optional[int] = None  # checked against the manifold when given
    dropout: float = 0.2
    encoder_width: int = 64
    resume: bool = False

    def validate(self, problems):
        TrainingOptions.validate(self, problems)
        DspOptions.validate(self, problems)
        _require(bool(self.manifest) and bool(self.manifold) and bool(self.out),
                 "--manifest, --manifold and --out are required", problems)
        _require(0 <= self.dropout < 1, "dropout must be in [0, 1)", problems)
        _require(self.encoder_width >= 1, "encoder_width must be >= 1", problems)
        _require(self.latent_size is None or self.latent_size >= 1, "latent_size must be >= 1", problems)


@dataclass
class TrainE2EConfig(TrainingOptions, DspOptions):
    manifest: str = ""
    out: str = ""
    modality: str = "depth"
    image_size: int = 128
    latent_size: int = 16
    dropout: float = 0.2
    encoder_width: int = 64

    def validate(self, problems):
        TrainingOptions.validate(self, problems)
        DspOptions.validate(self, problems)
        _require(bool(self.manifest) and bool(self.out), "--manifest and --out are required", problems)
        _require(self.modality in ("depth", "segmentation"), "modality must be depth or segmentation", problems)
        _require(self.latent_size >= 1 and self.image_size % self.latent_size == 0,
                 "image_size must be a multiple of latent_size", problems)


@dataclass
class InferConfig:
    model: str = ""
    manifold: str = ""  # empty for E2E checkpoints
    manifest: str = ""
    split: str = "test"
    out: str = ""
    output_size: Optional[int] = None  # defaults to the ground-truth size

    def validate(self, problems):
        _require(bool(self.model) and bool(self.manifest) and bool(self.out),
                 "--model, --manifest and --out are required", problems)
        _require(self.split in ("train", "val", "test"), "split must be train, val or test", problems)


@dataclass
class EvaluateConfig:
    predictions: list = field(default_factory=list)  # one or more infer output directories
    manifest: str = ""
    out: str = ""
    eigen_denominator: bool = False
    figures: bool = True

    def validate(self, problems):
        _require(bool(self.predictions), "at least one --predictions directory is required", problems)
        _require(bool(self.manifest) and bool(self.out), "--manifest and --out are required", problems)


COMMANDS = {
    "preprocess": PreprocessConfig,
    "gen-synth": GenSynthConfig,
    "train-vqvae": TrainVqConfig,
    "train-atnet": TrainAtConfig,
    "train-e2e": TrainE2EConfig,
    "infer": InferConfig,
    "evaluate": EvaluateConfig,
}


def field_types(cls) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _base_type(tp):
    """``Optional[int]`` -> int, ``list`` -> list."""
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0]
    return origin or tp


def _coerce(name: str, value, tp, problems: list[str]):
    base = _base_type(tp)
    if value is None:
        return None
    try:
        if base is bool:
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return value.lower() in ("true", "1", "yes")
            if not isinstance(value, (bool, int)):
                raise ValueError(value)
            return bool(value)
        if base is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if base is float:
            return float(value)
        if base is list:
            return [str(v) for v in value] if isinstance(value, (list, tuple)) else [str(value)]
        return str(value)
    except (TypeError, ValueError):
        problems.append(f"{name}: cannot interpret {value!r} as {getattr(base, '__name__', base)}")
        return None


def read_config_file(path: str | os.PathLike) -> dict:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    data = yaml.safe_load(p.read_text()) or {}  # YAML is a superset of JSON
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return data


def build(command: str, file_values: dict | None = None, flag_values: dict | None = None):
    """Merge defaults < file < flags into the command's config and validate it."""
    cls = COMMANDS[command]
    types_ = field_types(cls)
    merged: dict[str, Any] = {}
    problems: list[str] = []
    for source in (file_values or {}, {k: v for k, v in (flag_values or {}).items() if v is not None}):
        for key, value in source.items():
            name = key.replace("-", "_")
            if name not in types_:
                problems.append(f"unknown key {key!r} for {command}")
                continue
            merged[name] = _coerce(name, value, types_[name], problems)
    _check(problems)
    cfg = cls(**{k: v for k, v in merged.items() if v is not None})
    cfg.validate(problems)
    _check(problems)
    return cfg


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


# where results go and whether to resume do not change what is computed
_UNHASHED = ("out", "resume")


def config_hash(cfg) -> str:
    values = {k: v for k, v in to_dict(cfg).items() if k not in _UNHASHED}
    blob = json.dumps(values, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
