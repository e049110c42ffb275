import numpy as np
import pytest

from tdformer.datasets import DATASET_KINDS, DatasetSizes, synth_dataset
from tdformer.errors import ConfigurationError

SIZES = DatasetSizes(n_train=40, n_test=20, T=4, image_size=4)


@pytest.mark.parametrize("kind", DATASET_KINDS)
def test_shapes_and_labels(kind):
    data = synth_dataset(kind, SIZES, seed=1)
    assert data.x_train.shape == (40, 4, 1, 4, 4)
    assert data.x_test.shape == (20, 4, 1, 4, 4)
    assert set(np.unique(data.y_train)) <= {0, 1}


@pytest.mark.parametrize("kind", DATASET_KINDS)
def test_same_seed_same_data(kind):
    first = synth_dataset(kind, SIZES, seed=7)
    second = synth_dataset(kind, SIZES, seed=7)
    assert np.array_equal(first.x_train, second.x_train)
    assert np.array_equal(first.y_test, second.y_test)
    other = synth_dataset(kind, SIZES, seed=8)
    assert not np.array_equal(first.x_train, other.x_train)


def test_static_frames_repeat_over_time():
    data = synth_dataset("static", SIZES)
    assert np.array_equal(data.x_train[:, 0], data.x_train[:, 3])


def test_temporal_xor_label_needs_both_halves():
    sizes = DatasetSizes(n_train=200, n_test=10, T=4, image_size=4, noise=0.0)
    data = synth_dataset("temporal-xor", sizes)
    patterns = data.meta["patterns"]
    early = np.array([np.array_equal(x[0], patterns[1]) for x in data.x_train]).astype(int)
    late = np.array([np.array_equal(x[-1], patterns[1]) for x in data.x_train]).astype(int)
    assert np.array_equal(data.y_train, early ^ late)
    # each half alone is uninformative about the label
    assert 0 < np.mean(data.y_train[early == 1]) < 1


def test_rate_coded_rasters_are_binary():
    data = synth_dataset("rate-coded", DatasetSizes(n_train=400, n_test=10, T=4, image_size=4))
    assert set(np.unique(data.x_train)) <= {0.0, 1.0}
    low = data.x_train[data.y_train == 0].mean()
    high = data.x_train[data.y_train == 1].mean()
    assert abs(low - 0.2) < 0.02
    assert abs(high - 0.5) < 0.02


@pytest.mark.parametrize("kind, sizes, field", [
    ("spirals", SIZES, "dataset"),
    ("temporal-xor", DatasetSizes(T=1), "T"),
    ("temporal-xor", DatasetSizes(num_classes=3, rates=(0.1, 0.2, 0.3)), "num_classes"),
    ("rate-coded", DatasetSizes(rates=(0.2, 1.5)), "rates"),
])
def test_invalid_datasets(kind, sizes, field):
    with pytest.raises(ConfigurationError) as err:
        synth_dataset(kind, sizes)
    assert err.value.field == field


def test_invalid_sizes():
    with pytest.raises(ConfigurationError):
        DatasetSizes(n_train=0)
    with pytest.raises(ConfigurationError):
        DatasetSizes(noise=-1.0)
