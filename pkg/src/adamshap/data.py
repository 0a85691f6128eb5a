"""Synthetic datasets and the CSV dataset format.

CSV layout: header ``f0,...,f{d-1},label`` optionally followed by ``split``
(``train``/``val``/``test``) and ``flipped`` (``0``/``1``) columns.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng

SPLITS = ("train", "val", "test")
KINDS = ("gaussian_mixture", "xor_rings")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray = None
    flipped: np.ndarray = None
    n_classes: int = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise ValueError("feature row count differs from label count")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if self.split is None:
            self.split = np.full(n, "train")
        self.split = np.asarray(self.split, dtype=object)
        bad = set(self.split.tolist()) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")
        if self.flipped is None:
            self.flipped = np.zeros(n, dtype=bool)
        self.flipped = np.asarray(self.flipped, dtype=bool)
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if n else 0
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels must lie in [0, n_classes)")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def part(self, split: str):
        """``(X, y, global_indices)`` of one split."""
        idx = self.indices(split)
        return self.features[idx], self.labels[idx], idx


def _flip_labels(y, n_classes, count, rng: Rng):
    idx = np.sort(rng.choice(y.size, count)) if count else np.zeros(0, dtype=np.int64)
    y = y.copy()
    shift = 1 + np.floor(rng.uniform(idx.size) * (n_classes - 1)).astype(np.int64)
    y[idx] = (y[idx] + shift) % n_classes
    mask = np.zeros(y.size, dtype=bool)
    mask[idx] = True
    return y, mask


def _sample(kind, n, d, rng: Rng, class_sep, n_informative=0):
    if kind == "gaussian_mixture":
        y = (rng.uniform(n) < 0.5).astype(np.int64)
        direction = rng.child(1).gaussian(d)
        if n_informative:
            direction[n_informative:] = 0.0
        direction /= np.linalg.norm(direction)
        X = rng.child(2).gaussian((n, d)) + np.outer(2 * y - 1, direction) * (class_sep / 2)
        return X, y
    if kind == "xor_rings":
        if d < 2:
            raise ValueError("xor_rings needs at least two features")
        X = rng.child(2).gaussian((n, d))
        radius = np.hypot(X[:, 0], X[:, 1])
        y = ((X[:, 0] * X[:, 1] > 0) ^ (radius > 1.1774)).astype(np.int64)
        return X, y
    raise ValueError(f"unknown dataset kind {kind!r}")


def gen_data(kind="gaussian_mixture", n_samples=2000, n_features=10, flip_fraction=0.0,
             seed=0, n_val=200, n_test=500, class_sep=2.0, feature_scale_ratio=1.0, n_informative=0) -> Dataset:
    """Generate a deterministic two-class dataset.

    ``n_samples`` training rows are followed by ``n_val`` and ``n_test``
    held-out rows. Exactly ``round(flip_fraction * n_samples)`` training
    labels are flipped; held-out labels stay clean. ``feature_scale_ratio``
    shrinks feature scales geometrically from 1 (first) to ``1/ratio`` (last).
    A positive ``n_informative`` confines the class offset of the Gaussian
    mixture to the leading features and leaves the rest as pure noise.
    """
    if n_samples < 10:
        raise ValueError("n_samples must be >= 10")
    if not 0.0 <= flip_fraction <= 0.5:
        raise ValueError("flip_fraction must lie in [0, 0.5]")
    if not feature_scale_ratio > 0:
        raise ValueError("feature_scale_ratio must be > 0")
    if not 0 <= n_informative <= n_features:
        raise ValueError("n_informative must lie in [0, n_features]")
    if n_features < 1 or n_val < 0 or n_test < 0:
        raise ValueError("n_features must be >= 1 and split sizes >= 0")
    rng = Rng(seed)
    total = n_samples + n_val + n_test
    X, y = _sample(kind, total, n_features, rng.child(0), class_sep, n_informative)
    if feature_scale_ratio != 1.0:
        X = X * feature_scale_ratio ** -np.linspace(0.0, 1.0, n_features)
    y_train, mask = _flip_labels(y[:n_samples], 2, int(round(flip_fraction * n_samples)), rng.child(3))
    y = np.concatenate([y_train, y[n_samples:]])
    flipped = np.concatenate([mask, np.zeros(n_val + n_test, dtype=bool)])
    split = np.array(["train"] * n_samples + ["val"] * n_val + ["test"] * n_test, dtype=object)
    return Dataset(X, y, split, flipped, n_classes=2)


def write_csv(ds: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = ds.n_features
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{j}" for j in range(d)] + ["label", "split", "flipped"])
        for row, label, split, flip in zip(ds.features.tolist(), ds.labels.tolist(),
                                           ds.split.tolist(), ds.flipped.tolist()):
            w.writerow([repr(v) for v in row] + [label, split, int(flip)])
    return path


def read_csv(path, n_classes=None) -> Dataset:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_feat = 0
        while n_feat < len(header) and header[n_feat] == f"f{n_feat}":
            n_feat += 1
        if n_feat == 0 or n_feat >= len(header) or header[n_feat] != "label":
            raise ValueError("header must be f0..f{d-1} followed by label")
        extra = header[n_feat + 1:]
        unknown = set(extra) - {"split", "flipped"}
        if unknown:
            raise ValueError(f"unknown CSV columns {sorted(unknown)}")
        feats, labels, split, flipped = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"line {lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                vals = [float(c) for c in row[:n_feat]]
                label = int(row[n_feat])
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
            if not all(np.isfinite(vals)):
                raise ValueError(f"line {lineno}: non-finite feature")
            feats.append(vals)
            labels.append(label)
            cells = dict(zip(extra, row[n_feat + 1:]))
            split.append(cells.get("split", "train"))
            flipped.append(cells.get("flipped", "0") in ("1", "true", "True"))
    return Dataset(np.array(feats).reshape(-1, n_feat), np.array(labels, dtype=np.int64),
                   np.array(split, dtype=object), np.array(flipped), n_classes=n_classes)
