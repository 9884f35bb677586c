"""Bundled desk-scale datasets.

Two datasets ship with the package, both small enough for CPU training in
tests: a synthetic 4-class Gaussian blob task (generated deterministically
in code) and a 10-class 8x8 grayscale digit set stored in the tensor-archive
format. Each dataset has a fixed held-out test split; the train/val split is
the experiment's concern (seeded per run).
"""

import importlib.resources
from dataclasses import dataclass

import numpy as np

from .archive import load_archive
from .rand import rng_for

# constant: the blob task is part of the package, not a function of run seed
_BLOBS_SEED = 20240811
_BLOBS_POOL = 4096
_BLOBS_TEST = 1024
_DIGITS_SPLIT_SEED = 1797  # fixed test carve-out, independent of run seed


@dataclass
class Dataset:
    name: str
    x_pool: np.ndarray      # train+val pool
    y_pool: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    input_shape: tuple
    num_classes: int


def _make_blobs():
    rng = rng_for(_BLOBS_SEED, "blobs")
    n = _BLOBS_POOL + _BLOBS_TEST
    per = n // 4
    angles = np.array([0.25, 0.75, 1.25, 1.75]) * np.pi
    means = np.stack([2.0 * np.cos(angles), 2.0 * np.sin(angles)], axis=1)
    xs, ys = [], []
    for c in range(4):
        xs.append(rng.normal(means[c], 0.75, size=(per, 2)))
        ys.append(np.full(per, c))
    x = np.concatenate(xs).astype(np.float32)
    y = np.concatenate(ys).astype(np.int64)
    order = rng.permutation(n)
    x, y = x[order], y[order]
    return Dataset("blobs", x[:_BLOBS_POOL], y[:_BLOBS_POOL],
                   x[_BLOBS_POOL:], y[_BLOBS_POOL:], (2,), 4)


def _load_digits():
    ref = importlib.resources.files("ticketlab") / "data" / "digits.ltkt"
    with importlib.resources.as_file(ref) as path:
        entries = load_archive(path)
    x = entries["images"].astype(np.float32)
    y = entries["labels"].astype(np.int64)
    n = x.shape[0]
    order = np.random.default_rng(_DIGITS_SPLIT_SEED).permutation(n)
    x, y = x[order], y[order]
    n_test = n // 5
    return Dataset("digits", x[n_test:], y[n_test:], x[:n_test], y[:n_test],
                   (1, 8, 8), 10)


_LOADERS = {"blobs": _make_blobs, "digits": _load_digits}
_CACHE = {}


def load_dataset(name):
    if name not in _LOADERS:
        raise ValueError(f"unknown dataset {name!r} (have: {sorted(_LOADERS)})")
    if name not in _CACHE:
        _CACHE[name] = _LOADERS[name]()
    return _CACHE[name]


def split_train_val(dataset, ratio, seed):
    """Shuffle the pool with the run seed and split at `ratio`."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0,1), got {ratio}")
    n = dataset.x_pool.shape[0]
    order = rng_for(seed, "split", dataset.name).permutation(n)
    n_train = int(round(ratio * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split ratio {ratio} leaves an empty side for n={n}")
    tr, va = order[:n_train], order[n_train:]
    return (dataset.x_pool[tr], dataset.y_pool[tr],
            dataset.x_pool[va], dataset.y_pool[va])
