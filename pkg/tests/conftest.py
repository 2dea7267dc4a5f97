import numpy as np
import pytest

from poisonlab.data import Dataset


def make_dataset(labels, seed=0, resolution=(8, 8, 3), ids=None):
    """Small dataset with the given labels and random (but seeded) pixels."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels, dtype=np.int64)
    images = rng.uniform(0.0, 1.0, size=(len(labels),) + resolution).astype(np.float32)
    if ids is None:
        ids = np.arange(len(labels), dtype=np.int64)
    return Dataset(images=images, labels=labels, ids=np.asarray(ids, dtype=np.int64))


@pytest.fixture
def tiny_dataset():
    return make_dataset([0, 0, 1, 1, 1])
