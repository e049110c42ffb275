"""
Deterministic synthetic datasets.

static        one analog prototype per class plus Gaussian noise, shown at every step
temporal-xor  an early and a late binary pattern; the label is their XOR, so it
              can only be computed by combining both halves of the sequence
rate-coded    Bernoulli spike rasters whose rate depends on the class

Samples are arrays of shape [S, T, C, H, W].
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

logger = logging.getLogger(__name__)

DATASET_KINDS = ("static", "temporal-xor", "rate-coded")


@dataclass(frozen=True)
class DatasetSizes:
    n_train: int = 256
    n_test: int = 128
    T: int = 4
    channels: int = 1
    image_size: int = 8
    num_classes: int = 2
    noise: float = 0.1
    rates: tuple = (0.2, 0.5)

    def __post_init__(self):
        for name in ("n_train", "n_test", "T", "channels", "image_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError("must be positive", field=name)
        if self.num_classes < 2:
            raise ConfigurationError("need at least two classes", field="num_classes")
        if self.noise < 0:
            raise ConfigurationError("must be >= 0", field="noise")


@dataclass
class Dataset:
    kind: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    meta: dict = field(default_factory=dict)


def _static(rng, sizes, count, prototypes):
    labels = rng.integers(0, sizes.num_classes, size=count)
    frames = prototypes[labels] + sizes.noise * rng.standard_normal(prototypes[labels].shape)
    return np.repeat(frames[:, None], sizes.T, axis=1), labels


def _temporal_xor(rng, sizes, count, patterns):
    early = rng.integers(0, 2, size=count)
    late = rng.integers(0, 2, size=count)
    split = sizes.T // 2
    x = np.empty((count, sizes.T) + patterns.shape[1:])
    x[:, :split] = patterns[early][:, None]
    x[:, split:] = patterns[late][:, None]
    if sizes.noise:
        x = x + sizes.noise * rng.standard_normal(x.shape)
    return x, early ^ late


def _rate_coded(rng, sizes, count, rates):
    labels = rng.integers(0, sizes.num_classes, size=count)
    shape = (count, sizes.T, sizes.channels, sizes.image_size, sizes.image_size)
    draws = rng.random(shape)
    return (draws < rates[labels].reshape(-1, 1, 1, 1, 1)).astype(np.float64), labels


def synth_dataset(kind, sizes=None, seed=0):
    sizes = sizes or DatasetSizes()
    rng = np.random.default_rng(seed)
    frame = (sizes.channels, sizes.image_size, sizes.image_size)
    meta = {"seed": seed}

    if kind == "static":
        prototypes = rng.random((sizes.num_classes,) + frame)
        meta["prototypes"] = prototypes
        train = _static(rng, sizes, sizes.n_train, prototypes)
        test = _static(rng, sizes, sizes.n_test, prototypes)
    elif kind == "temporal-xor":
        if sizes.T < 2:
            raise ConfigurationError("temporal-xor needs T >= 2", field="T")
        if sizes.num_classes != 2:
            raise ConfigurationError("temporal-xor has exactly two classes", field="num_classes")
        patterns = np.zeros((2,) + frame)
        while np.array_equal(patterns[0], patterns[1]):
            patterns = (rng.random((2,) + frame) < 0.5).astype(np.float64)
        meta["patterns"] = patterns
        train = _temporal_xor(rng, sizes, sizes.n_train, patterns)
        test = _temporal_xor(rng, sizes, sizes.n_test, patterns)
    elif kind == "rate-coded":
        rates = np.asarray(sizes.rates, dtype=np.float64)
        if rates.shape != (sizes.num_classes,) or np.any((rates < 0) | (rates > 1)):
            raise ConfigurationError("need one rate in [0, 1] per class", field="rates")
        meta["rates"] = rates
        train = _rate_coded(rng, sizes, sizes.n_train, rates)
        test = _rate_coded(rng, sizes, sizes.n_test, rates)
    else:
        raise ConfigurationError("unknown dataset '{}', expected one of {}".format(kind, DATASET_KINDS),
                                 field="dataset")

    logger.debug("[Data] %s: %s train / %s test samples", kind, sizes.n_train, sizes.n_test)
    return Dataset(kind, train[0], train[1], test[0], test[1], meta)
