"""Desk-scale datasets: planted-pattern images and byte-level text."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from hopattn.errors import ConfigError, InputError


@dataclass
class VisionDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    patterns: np.ndarray

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name == "train":
            return self.x_train, self.y_train
        if name in ("test", "val"):
            return self.x_test, self.y_test
        raise KeyError(name)

    def sample(self, rng: np.random.Generator, batch_size: int):
        n = len(self.y_train)
        if batch_size <= 0 or batch_size >= n:
            return self.x_train, self.y_train
        idx = rng.choice(n, size=batch_size, replace=False)
        return self.x_train[idx], self.y_train[idx]

    def chance(self, split: str = "test") -> float:
        """Accuracy of always predicting the most frequent label."""
        _, y = self.split(split)
        return float(np.bincount(y, minlength=self.n_classes).max() / len(y))


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def make_synthetic_vision(n_classes: int = 4, n_samples: int = 1200, test_fraction: float = 0.25,
                          image_size: int = 8, patch: int = 4, noise: float = 0.5,
                          seed: int = 0) -> VisionDataset:
    """Images tiled by fixed random patterns whose arrangement encodes the class.

    Each image is a grid of ``(image_size/patch)**2`` patches.  There are as
    many fixed patterns as patches; class ``c`` places them according to its
    own permutation, and Gaussian pixel noise is added.  Every class uses the
    same multiset of patterns, so the average patch carries no label
    information: a model has to relate content to position.  Labels are
    balanced and the train/test split is stratified.
    """
    if n_classes < 2:
        raise ConfigError("need at least two classes")
    if image_size % patch:
        raise ConfigError("image_size must be a multiple of patch")
    g = image_size // patch
    n_patch = g * g
    rng = np.random.default_rng(seed)
    patterns = rng.normal(0.0, 1.0, (n_patch, patch, patch))
    if n_classes > math.factorial(n_patch):
        raise ConfigError(f"at most {math.factorial(n_patch)} classes with {n_patch} patches")
    layouts: list[tuple] = []
    while len(layouts) < n_classes:
        perm = tuple(rng.permutation(n_patch))
        if perm not in layouts:
            layouts.append(perm)
    layouts = np.array(layouts)

    labels = _balanced_labels(n_samples, n_classes, rng)
    tiles = patterns[layouts[labels]]  # (n, n_patch, p, p)
    images = tiles.reshape(n_samples, g, g, patch, patch).transpose(0, 1, 3, 2, 4)
    images = images.reshape(n_samples, image_size, image_size)
    images = images + noise * rng.normal(size=images.shape)
    images = images[..., None]

    test_idx = []
    for c in range(n_classes):
        members = np.flatnonzero(labels == c)
        test_idx.append(members[: int(round(len(members) * test_fraction))])
    test_mask = np.zeros(n_samples, dtype=bool)
    test_mask[np.concatenate(test_idx)] = True
    return VisionDataset(images[~test_mask], labels[~test_mask], images[test_mask],
                         labels[test_mask], n_classes, patterns)


@dataclass
class CharCorpus:
    train_ids: np.ndarray
    val_ids: np.ndarray
    context: int
    vocab: int = 256

    def windows(self, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
        ids = self.train_ids if split == "train" else self.val_ids
        return extract_windows(ids, self.context)

    def split(self, name: str):
        return self.windows("train" if name == "train" else "val")

    def sample(self, rng: np.random.Generator, batch_size: int):
        x, y = self.windows("train")
        if batch_size <= 0 or batch_size >= len(x):
            return x, y
        idx = rng.choice(len(x), size=batch_size, replace=False)
        return x[idx], y[idx]


def extract_windows(ids: np.ndarray, context: int) -> tuple[np.ndarray, np.ndarray]:
    """Stride-1 windows: ``len(ids) - context`` (input, next-token target) pairs."""
    n = len(ids) - context
    if n <= 0:
        return np.zeros((0, context), dtype=np.int64), np.zeros((0, context), dtype=np.int64)
    idx = np.arange(n)[:, None] + np.arange(context)[None, :]
    return ids[idx], ids[idx + 1]


def make_char_corpus(path: str | os.PathLike, context: int = 32,
                     val_fraction: float = 0.1) -> CharCorpus:
    """Byte-level corpus with a contiguous train/validation split."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read corpus {path!r}: {exc}") from exc
    if not blob:
        raise InputError(f"corpus {path!r} is empty")
    ids = np.frombuffer(blob, dtype=np.uint8).astype(np.int64)
    cut = int(round(len(ids) * (1.0 - val_fraction)))
    train, val = ids[:cut], ids[cut:]
    if len(train) <= context or len(val) <= context:
        raise InputError(f"corpus {path!r} has {len(ids)} bytes, too short for context {context}")
    return CharCorpus(train, val, context)
