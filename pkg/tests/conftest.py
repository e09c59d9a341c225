import numpy as np
import pytest

from h2t.prototypes import PrototypeSet


def make_prototypes(centroids, seed=0, epochs=1):
    """PrototypeSet from explicit centroid rows (normalized here)."""
    arr = np.asarray(centroids, dtype=np.float64)
    arr = arr / np.linalg.norm(arr, axis=1, keepdims=True)
    return PrototypeSet(
        centroids=arr.astype(np.float32),
        k=arr.shape[0],
        feature_dim=arr.shape[1],
        epochs_run=epochs,
        seed=seed,
    )


def unit2(angle_deg):
    rad = np.deg2rad(angle_deg)
    return np.array([np.cos(rad), np.sin(rad)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _quiet_k_warning():
    import warnings

    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=r"k=\d+ is outside the usual")
        yield
