"""Experiment configuration, presets and ``key=value`` overrides.

A config is a nested dataclass that serializes to plain JSON and is echoed
verbatim into every checkpoint and report.  Presets come in two scales:
the desk-scale default (small synthetic data, few epochs) and the full
setting selected with ``paper_scale=True``, which expects IDX image files.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, is_dataclass


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic_grid"
    path: str | None = None
    n: int = 500
    n_val: int = 100
    side: int = 5
    n_blobs: int = 1
    sharpness: float = 4.0
    seed: int = 0
    binarize: str = "bernoulli_once"
    threshold: float = 0.5
    # linear-Gaussian source
    latent_dim: int = 2
    data_dim: int = 4
    noise_var: float = 0.5
    scale: float = 1.0


@dataclass
class ModelConfig:
    latent_dim: int = 2
    encoder_hidden: list = field(default_factory=lambda: [100])
    decoder_hidden: list = field(default_factory=lambda: [100])
    activation: str = "tanh"
    family: str = "ffg"
    flow_steps: int = 2
    flow_hidden: list = field(default_factory=lambda: [50])
    aux_hidden: list = field(default_factory=lambda: [50])
    reverse_uses_x: bool = False
    flow_identity_start: bool = True


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 50
    lr: float = 1e-3
    lr_decay: float = 1.0
    warmup_epochs: float = 0.0
    n_samples: int = 1
    track_subset: int = 100
    track_samples: int = 10
    seed: int = 0


@dataclass
class EvalConfig:
    split: str = "train"
    subset: int = 20
    families: list = field(default_factory=lambda: ["ffg", "flow"])
    n_final: int = 5000
    iwae_k: int = 5000
    ais_chains: int = 16
    ais_intermediate: int = 1000
    ais_leapfrog: int = 10
    schedule: str = "linear"
    local_max_steps: int = 50000
    local_samples: int = 100
    local_lr: float = 1e-3
    local_window: int = 100
    local_patience: int = 10
    local_flow_steps: int = 2
    local_flow_hidden: list = field(default_factory=lambda: [20])
    local_aux_hidden: list = field(default_factory=lambda: [20])
    local_identity_start: bool = True
    curve_points: int = 6
    grid_n: int = 100
    grid_lo: float = -4.0
    grid_hi: float = 4.0
    grid_index: int = 0
    bdmc_points: int = 100
    seed: int = 0


@dataclass
class RetrainConfig:
    family: str = "ffg"
    encoder_hidden: list = field(default_factory=list)
    epochs: int = 200
    lr: float = 1e-3
    seed: int = 1


@dataclass
class ExperimentConfig:
    preset: str = "viz2d"
    paper_scale: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    retrain: RetrainConfig = field(default_factory=RetrainConfig)

    def to_dict(self):
        return asdict(self)


def _mnist_data():
    return {"source": "idx_file", "binarize": "bernoulli_once", "n": 60000, "n_val": 0}


def _mnist_model(family, enc=(200, 200)):
    return {"latent_dim": 50, "encoder_hidden": list(enc), "decoder_hidden": [200, 200],
            "activation": "elu", "family": family, "flow_hidden": [100, 100],
            "aux_hidden": [100, 100]}


# desk-scale stand-ins: the same studies on small binary blob images
_DESK_MNIST = {"data": {"source": "synthetic_grid", "side": 8, "n": 1000, "n_val": 100},
               "model": {"latent_dim": 4, "encoder_hidden": [50, 50], "decoder_hidden": [50, 50],
                         "activation": "elu", "flow_hidden": [50], "aux_hidden": [50]},
               "train": {"epochs": 100, "batch_size": 100, "warmup_epochs": 20}}

PRESETS = {
    "viz2d": {
        "desk": {"model": {"latent_dim": 2, "encoder_hidden": [100], "decoder_hidden": [100],
                           "activation": "tanh"},
                 "train": {"epochs": 200, "batch_size": 50, "lr": 1e-3}},
        "paper": {"data": _mnist_data(),
                  "model": {"latent_dim": 2, "encoder_hidden": [100], "decoder_hidden": [100],
                            "activation": "tanh"},
                  "train": {"epochs": 3000, "batch_size": 50, "lr": 1e-4}},
    },
    "mnist-ffg": {
        "desk": _DESK_MNIST,
        "paper": {"data": _mnist_data(), "model": _mnist_model("ffg"),
                  "train": {"epochs": 3280, "batch_size": 100, "warmup_epochs": 400},
                  "eval": {"subset": 1000, "families": ["ffg", "aux_flow"]}},
    },
    "mnist-af": {
        "desk": {**_DESK_MNIST, "model": {**_DESK_MNIST["model"], "family": "aux_flow"}},
        "paper": {"data": _mnist_data(), "model": _mnist_model("aux_flow"),
                  "train": {"epochs": 3280, "batch_size": 100, "warmup_epochs": 400},
                  "eval": {"subset": 1000, "families": ["ffg", "aux_flow"]}},
    },
    "large-encoder": {
        "desk": {**_DESK_MNIST, "model": {**_DESK_MNIST["model"], "encoder_hidden": [200, 200]}},
        "paper": {"data": _mnist_data(), "model": _mnist_model("ffg", (500, 500)),
                  "train": {"epochs": 3280, "batch_size": 100, "warmup_epochs": 400},
                  "eval": {"subset": 1000, "families": ["ffg", "aux_flow"]}},
    },
    "no-warmup": {
        "desk": {**_DESK_MNIST, "train": {**_DESK_MNIST["train"], "warmup_epochs": 0}},
        "paper": {"data": _mnist_data(), "model": _mnist_model("ffg"),
                  "train": {"epochs": 3280, "batch_size": 100, "warmup_epochs": 0},
                  "eval": {"subset": 1000, "families": ["ffg", "aux_flow"]}},
    },
    "retrained-linear": {
        "desk": {**_DESK_MNIST, "retrain": {"encoder_hidden": [], "epochs": 100},
                 "eval": {"families": ["ffg", "flow", "aux_flow"]}},
        "paper": {"data": _mnist_data(), "model": _mnist_model("ffg"),
                  "train": {"epochs": 3280, "batch_size": 100, "warmup_epochs": 400},
                  "retrain": {"encoder_hidden": [], "epochs": 3280},
                  "eval": {"subset": 1000, "families": ["ffg", "flow", "aux_flow"]}},
    },
    "small-1000": {
        "desk": {**_DESK_MNIST, "data": {**_DESK_MNIST["data"], "n": 1000}},
        "paper": {"data": {**_mnist_data(), "n": 1000}, "model": _mnist_model("ffg"),
                  "train": {"epochs": 3280, "batch_size": 100, "warmup_epochs": 400},
                  "eval": {"subset": 1000}},
    },
}


def _merge(target, updates, path=""):
    for key, value in updates.items():
        if not hasattr(target, key):
            raise ConfigError(f"unknown config key {path + key!r}")
        current = getattr(target, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{path + key!r} must be an object")
            _merge(current, value, f"{path}{key}.")
        else:
            setattr(target, key, copy.deepcopy(value))


def from_dict(d):
    cfg = ExperimentConfig()
    _merge(cfg, d)
    return cfg


def preset(name, paper_scale=False):
    """Config for a named preset (desk scale unless ``paper_scale``)."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = ExperimentConfig(preset=name, paper_scale=paper_scale)
    _merge(cfg, PRESETS[name]["paper" if paper_scale else "desk"])
    return cfg


def parse_override(text):
    """``"train.epochs=5"`` -> ``{"train": {"epochs": 5}}``; values are JSON when they parse."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = value
    for part in reversed(key.strip().split(".")):
        out = {part: out}
    return out


def load_config(path=None, overrides=(), preset_name=None, paper_scale=None):
    """Resolve a config: preset (from file or argument), then file contents, then overrides."""
    doc = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
    name = preset_name or doc.get("preset", "viz2d")
    scale = doc.get("paper_scale", False) if paper_scale is None else paper_scale
    cfg = preset(name, scale)
    _merge(cfg, {k: v for k, v in doc.items() if k not in ("preset", "paper_scale")})
    for text in overrides:
        _merge(cfg, parse_override(text))
    validate(cfg)
    return cfg


def validate(cfg):
    fams = {"ffg", "flow", "aux_flow"}
    checks = [
        (cfg.model.family in fams, f"model.family must be one of {sorted(fams)}"),
        (cfg.retrain.family in fams, f"retrain.family must be one of {sorted(fams)}"),
        (set(cfg.eval.families) <= fams, f"eval.families must be drawn from {sorted(fams)}"),
        (cfg.model.latent_dim >= 1, "model.latent_dim must be positive"),
        (cfg.train.epochs >= 0, "train.epochs must be non-negative"),
        (cfg.train.batch_size >= 1, "train.batch_size must be positive"),
        (cfg.train.lr > 0, "train.lr must be positive"),
        (cfg.train.warmup_epochs >= 0, "train.warmup_epochs must be non-negative"),
        (cfg.eval.subset >= 1, "eval.subset must be positive"),
        (cfg.eval.schedule in ("linear", "sigmoid"), "eval.schedule must be linear or sigmoid"),
        (cfg.data.source in ("idx_file", "synthetic_gauss", "synthetic_grid"),
         "data.source must be idx_file, synthetic_gauss or synthetic_grid"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    return cfg
