"""
Experiment configuration: one flat, commented YAML file per experiment.

Every key maps to a single setting. Unknown keys, missing required keys and
values of the wrong type are rejected with a message naming the key, and the
resolved settings are validated by the model, training and dataset types
before anything runs.
"""
import hashlib
import json
import logging
from dataclasses import dataclass, field

import yaml

from .analysis import MI_ESTIMATORS
from .datasets import DATASET_KINDS, DatasetSizes
from .errors import ConfigurationError
from .model import ModelConfig, TrainingConfig

logger = logging.getLogger(__name__)

REQUIRED_KEYS = ("dataset", "T", "n_sub", "alphas", "epochs")

MODEL_KEYS = ("image_size", "in_channels", "patch_size", "embed_channels", "depth", "conv_blocks",
              "num_classes", "attention", "heads", "scale", "mlp_ratio", "cm", "pm", "clamp_a", "clamp_b",
              "tau", "v_th", "v_reset", "attn_v_th", "pm_v_th", "feedback", "persist_membrane")
TRAINING_KEYS = ("batch_size", "optimizer", "lr", "weight_decay", "momentum", "lr_schedule")

DEFAULTS = {
    # model
    "image_size": 8,
    "in_channels": 1,
    "patch_size": 1,
    "embed_channels": 32,
    "depth": 2,
    "conv_blocks": 1,
    "num_classes": 2,
    "attention": "ssa",
    "heads": 2,
    "scale": 0.125,
    "mlp_ratio": 2,
    "cm": "CM1",
    "pm": "v1",
    "clamp_a": 1.5,
    "clamp_b": 0.0,
    "tau": 2.0,
    "v_th": 1.0,
    "v_reset": 0.0,
    "attn_v_th": 0.5,
    "pm_v_th": 0.5,
    "feedback": True,
    "persist_membrane": False,
    # training
    "batch_size": 32,
    "optimizer": "adamw",
    "lr": 1e-3,
    "weight_decay": 0.01,
    "momentum": 0.9,
    "lr_schedule": "cosine",
    # dataset
    "n_train": 256,
    "n_test": 128,
    "noise": 0.1,
    "rates": [0.2, 0.5],
    # run
    "seed": 0,
    "seeds": [0, 1, 2],
    "out": "output",
    "precision": 64,
    "samples": 100000,
    "workers": 1,
    "mi_units": 256,
    "mi_estimator": "plug-in",
    "mi_bins": 2,
    "e_mac": 4.6,
    "e_ac": 0.9,
}

# float settings also accept integers written without a decimal point
_NUMBER = (int, float)


def _as_float(value):
    """``value`` as a float, or None when it is not a number.

    YAML 1.1 reads exponents without a decimal point (``1e-3``) as strings.
    """
    if isinstance(value, bool):
        return None
    if isinstance(value, _NUMBER):
        return float(value)
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return None
    return None


def _check_type(key, value):
    if key == "alphas":
        numbers = [_as_float(v) for v in value] if isinstance(value, list) else []
        if not numbers or None in numbers:
            raise ConfigurationError("expected a list of numbers, got {!r}".format(value), field=key)
        return numbers
    if key == "dataset":
        if value not in DATASET_KINDS:
            raise ConfigurationError("expected one of {}, got {!r}".format(DATASET_KINDS, value), field=key)
        return value
    if key in ("T", "n_sub", "epochs"):
        expected = 0
    else:
        expected = DEFAULTS[key]

    if isinstance(expected, bool):
        ok = isinstance(value, bool)
    elif isinstance(expected, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(expected, float):
        number = _as_float(value)
        ok = number is not None
        value = number if ok else value
    elif key == "seeds":
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    elif isinstance(expected, list):
        numbers = [_as_float(v) for v in value] if isinstance(value, list) else [None]
        ok = None not in numbers
        value = numbers if ok else value
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigurationError("expected {}, got {!r}".format(type(expected).__name__, value), field=key)
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict
    model: ModelConfig
    training: TrainingConfig
    sizes: DatasetSizes
    dataset: str
    seed: int
    seeds: tuple
    out: str
    precision: int
    samples: int
    workers: int
    mi_units: int
    mi_estimator: str
    mi_bins: int
    e_mac: float
    e_ac: float
    source: str = field(default=None, compare=False)

    @property
    def hash(self):
        return config_hash(self)


def build_config(raw, source=None):
    """Validate a flat mapping of settings into an ``ExperimentConfig``."""
    if not isinstance(raw, dict):
        raise ConfigurationError("expected a mapping of settings, got {}".format(type(raw).__name__),
                                 field="config")
    for key in REQUIRED_KEYS:
        if key not in raw:
            raise ConfigurationError("required setting is missing", field=key)
    unknown = sorted(set(raw) - set(REQUIRED_KEYS) - set(DEFAULTS))
    if unknown:
        raise ConfigurationError("unknown setting", field=unknown[0])

    values = dict(DEFAULTS)
    values.update({key: _check_type(key, value) for key, value in raw.items()})
    if values["precision"] not in (32, 64):
        raise ConfigurationError("expected 32 or 64", field="precision")
    for key in ("samples", "workers", "mi_units"):
        if values[key] < 1:
            raise ConfigurationError("must be >= 1", field=key)
    if values["mi_estimator"] not in MI_ESTIMATORS:
        raise ConfigurationError("expected one of {}".format(MI_ESTIMATORS), field="mi_estimator")
    if values["mi_bins"] < 2 or (values["mi_estimator"] == "plug-in" and values["mi_bins"] != 2):
        raise ConfigurationError("plug-in needs 2 bins, histogram at least 2", field="mi_bins")

    model = ModelConfig(T=values["T"], n_sub=values["n_sub"], alphas=tuple(values["alphas"]),
                        seed=values["seed"], **{key: values[key] for key in MODEL_KEYS})
    training = TrainingConfig(epochs=values["epochs"], **{key: values[key] for key in TRAINING_KEYS})
    sizes = DatasetSizes(n_train=values["n_train"], n_test=values["n_test"], T=values["T"],
                         channels=values["in_channels"], image_size=values["image_size"],
                         num_classes=values["num_classes"], noise=values["noise"],
                         rates=tuple(values["rates"]))
    return ExperimentConfig(values=values, model=model, training=training, sizes=sizes,
                            dataset=values["dataset"], seed=values["seed"], seeds=tuple(values["seeds"]),
                            out=values["out"], precision=values["precision"], samples=values["samples"],
                            workers=values["workers"], mi_units=values["mi_units"],
                            mi_estimator=values["mi_estimator"], mi_bins=values["mi_bins"],
                            e_mac=values["e_mac"], e_ac=values["e_ac"], source=source)


def load_config(path, overrides=None):
    """Read ``path`` and apply ``overrides`` (command-line values, None means unset)."""
    with open(path, "rb") as yaml_file:
        try:
            raw = yaml.safe_load(yaml_file)
        except yaml.YAMLError as err:
            raise ConfigurationError("{} is not valid YAML: {}".format(path, err), field="config")
    if raw is None:
        raise ConfigurationError("{} is empty".format(path), field="config")
    if not isinstance(raw, dict):
        raise ConfigurationError("{} must hold key: value settings".format(path), field="config")
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    cfg = build_config(raw, source=str(path))
    logger.debug("[Config] %s resolved to %s", path, cfg.hash[:12])
    return cfg


# settings that do not affect results
UNHASHED_KEYS = ("out", "workers")


def config_hash(cfg):
    values = cfg.values if isinstance(cfg, ExperimentConfig) else cfg
    values = {key: value for key, value in values.items() if key not in UNHASHED_KEYS}
    canonical = json.dumps(values, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf8")).hexdigest()
