import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_blobs():
    """Small shared blob dataset: 5 classes, 40 per class, 16x16."""
    from lander.data import synthetic_blobs_dataset

    return synthetic_blobs_dataset(5, 40, image_shape=(3, 16, 16), seed=11, class_seed=3)


def assert_state_dicts_equal(a, b):
    assert a.keys() == b.keys()
    for k in a:
        assert torch.equal(a[k], b[k]), f"mismatch at {k}"


def rand_labels(rng, n, num_classes):
    return np.asarray(rng.integers(0, num_classes, size=n), dtype=np.int64)
