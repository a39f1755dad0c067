"""Feature/label datasets with optional per-column standardization."""

from __future__ import annotations

import csv

import numpy as np


class EmptyDataset(Exception):
    pass


class ScalingError(Exception):
    pass


class Dataset:
    """Features (n_v x n_d) and labels (n_l x n_d) stored column-per-sample."""

    def __init__(self, features, labels, feature_names=None, label_names=None):
        self.features = np.atleast_2d(np.asarray(features, dtype=float))
        self.labels = np.atleast_2d(np.asarray(labels, dtype=float))
        if self.features.shape[1] != self.labels.shape[1]:
            raise ValueError(
                f"feature/label sample counts differ: "
                f"{self.features.shape[1]} vs {self.labels.shape[1]}"
            )
        if self.features.shape[1] == 0:
            raise EmptyDataset("dataset has no samples")
        self.feature_names = list(
            feature_names or (f"v{i}" for i in range(self.features.shape[0]))
        )
        self.label_names = list(
            label_names or (f"l{i}" for i in range(self.labels.shape[0]))
        )
        self.feature_mean = None
        self.feature_std = None
        self.label_mean = None
        self.label_std = None

    @property
    def n_v(self):
        return self.features.shape[0]

    @property
    def n_l(self):
        return self.labels.shape[0]

    @property
    def n_d(self):
        return self.features.shape[1]

    @property
    def scaled(self):
        return self.feature_mean is not None

    def enable_scaling(self):
        """Compute per-row mean/std for standardization; std must be > 0."""
        fm = self.features.mean(axis=1)
        fs = self.features.std(axis=1)
        lm = self.labels.mean(axis=1)
        ls = self.labels.std(axis=1)
        if np.any(fs <= 0) or np.any(ls <= 0):
            raise ScalingError("constant column: standard deviation is zero")
        self.feature_mean, self.feature_std = fm, fs
        self.label_mean, self.label_std = lm, ls
        return self

    def scale_features(self, v):
        v = np.asarray(v, dtype=float)
        return (v - self.feature_mean.reshape(-1, *([1] * (v.ndim - 1)))) / (
            self.feature_std.reshape(-1, *([1] * (v.ndim - 1)))
        )

    def scale_labels(self, l):
        l = np.asarray(l, dtype=float)
        return (l - self.label_mean.reshape(-1, *([1] * (l.ndim - 1)))) / (
            self.label_std.reshape(-1, *([1] * (l.ndim - 1)))
        )

    def descale_labels(self, l):
        l = np.asarray(l, dtype=float)
        return l * self.label_std.reshape(-1, *([1] * (l.ndim - 1))) + (
            self.label_mean.reshape(-1, *([1] * (l.ndim - 1)))
        )

    @classmethod
    def from_csv(cls, path, feature_names, label_names):
        """Load named columns from a header-row CSV file."""
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [row for row in reader if row]
        if not rows:
            raise EmptyDataset(f"no data rows in {path}")
        index = {name: i for i, name in enumerate(header)}
        for name in list(feature_names) + list(label_names):
            if name not in index:
                raise KeyError(f"column {name!r} not found in {path}")
        data = np.array([[float(v) for v in row] for row in rows]).T
        feats = data[[index[n] for n in feature_names]]
        labs = data[[index[n] for n in label_names]]
        return cls(feats, labs, list(feature_names), list(label_names))
