import numpy as np
import pytest

from bcrec.data import Dataset
from bcrec.encoders import EmbeddingTable
from bcrec.losses import LossBatch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_table(num_users, num_items, d, rng, scale=1.0) -> EmbeddingTable:
    return EmbeddingTable(scale * rng.normal(size=(num_users, d)),
                          scale * rng.normal(size=(num_items, d)))


def make_batch(num_users, num_items, b, j, rng) -> LossBatch:
    users = rng.integers(0, num_users, size=b)
    pos = rng.integers(0, num_items, size=b)
    neg = rng.integers(0, num_items, size=(b, j))
    return LossBatch(users.astype(np.int64), pos.astype(np.int64),
                     neg.astype(np.int64), np.full(b, j, dtype=np.int64))


def make_dataset(pairs, num_users=None, num_items=None, timestamps=None) -> Dataset:
    users = np.array([u for u, _ in pairs], dtype=np.int64)
    items = np.array([i for _, i in pairs], dtype=np.int64)
    nu = num_users if num_users is not None else (users.max() + 1 if len(users) else 0)
    ni = num_items if num_items is not None else (items.max() + 1 if len(items) else 0)
    ts = None if timestamps is None else np.array(timestamps, dtype=np.int64)
    return Dataset(users, items, ts, nu, ni,
                   [f"u{k}" for k in range(nu)], [f"i{k}" for k in range(ni)])


def finite_diff_max_rel_err(value_fn, arrays_with_grads, h=1e-5, floor=1e-4):
    """Central-difference check; returns the worst per-component relative error.

    arrays_with_grads: list of (array, rows, row_grads) where rows index the
    array's first axis and row_grads are the analytic gradients for them.
    """
    worst = 0.0
    for arr, rows, grads in arrays_with_grads:
        for slot, r in enumerate(np.asarray(rows).tolist()):
            for k in range(arr.shape[1]):
                orig = arr[r, k]
                arr[r, k] = orig + h
                up = value_fn()
                arr[r, k] = orig - h
                down = value_fn()
                arr[r, k] = orig
                fd = (up - down) / (2 * h)
                g = grads[slot, k]
                worst = max(worst, abs(fd - g) / max(abs(fd), abs(g), floor))
    return worst
