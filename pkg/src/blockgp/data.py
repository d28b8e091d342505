"""Data ingestion, splitting, whitening, and synthetic GP-draw generation.

Datasets are split 4/9 train, 2/9 validation, 3/9 test (remainder rows go
to test) with a seeded shuffle. Features and targets are standardized to
mean 0 and standard deviation 1 as measured on the training split only;
all stored arrays are on that standardized scale.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import kernels
from .errors import NumericError
from .kernels import KernelModel

SPLIT_NINTHS = (4, 2, 3)  # train, validation, test
_SYNTHETIC_GUARD_N = 20_000


@dataclass
class RawTable:
    """Parsed CSV contents before splitting."""

    features: np.ndarray
    target: np.ndarray
    feature_names: list[str]
    target_name: str
    constant_columns: list[str] = field(default_factory=list)


@dataclass
class Dataset:
    """A named, standardized dataset with its split and whitening record."""

    name: str
    X: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: float
    target_std: float
    truth: KernelModel | None = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def X_train(self):
        return self.X[self.train_idx]

    @property
    def y_train(self):
        return self.y[self.train_idx]

    @property
    def X_val(self):
        return self.X[self.val_idx]

    @property
    def y_val(self):
        return self.y[self.val_idx]

    @property
    def X_test(self):
        return self.X[self.test_idx]

    @property
    def y_test(self):
        return self.y[self.test_idx]

    def subsample_train(self, fraction: float, seed: int) -> "Dataset":
        """A copy whose training split is a nested seeded subset; the
        validation and test splits are untouched."""
        if not 0 < fraction <= 1:
            raise ValueError("fraction must be in (0, 1]")
        rng = np.random.default_rng(seed)
        order = rng.permutation(self.train_idx.shape[0])
        keep = max(1, int(round(fraction * self.train_idx.shape[0])))
        sub = np.sort(self.train_idx[order[:keep]])
        return Dataset(
            name=f"{self.name}[{fraction:g}]", X=self.X, y=self.y,
            train_idx=sub, val_idx=self.val_idx, test_idx=self.test_idx,
            feature_mean=self.feature_mean, feature_std=self.feature_std,
            target_mean=self.target_mean, target_std=self.target_std,
            truth=self.truth,
        )


def load_csv(path, target_column: str) -> RawTable:
    """Parse a headed CSV of numeric columns into 64-bit floats.

    Malformed or missing cells raise with their (line, column) location.
    Constant feature columns survive but are flagged, since their variance
    is unusable for whitening.
    """
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        if target_column not in header:
            raise ValueError(
                f"{path}: target column {target_column!r} not in header {header}")
        t_pos = header.index(target_column)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(
                    f"{path}: line {lineno} has {len(row)} fields, "
                    f"expected {len(header)}")
            values = []
            for cell, name in zip(row, header):
                cell = cell.strip()
                if cell == "":
                    raise ValueError(
                        f"{path}: missing value at line {lineno}, column {name!r}")
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"{path}: could not parse {cell!r} at line {lineno}, "
                        f"column {name!r}") from None
            rows.append(values)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    table = np.asarray(rows, dtype=np.float64)
    target = table[:, t_pos]
    features = np.delete(table, t_pos, axis=1)
    names = [h for i, h in enumerate(header) if i != t_pos]
    constant = [name for j, name in enumerate(names)
                if np.ptp(features[:, j]) == 0.0]
    return RawTable(features=features, target=target, feature_names=names,
                    target_name=target_column, constant_columns=constant)


def save_csv(path, X, y, target_name: str = "target") -> None:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(X.shape[1])] + [target_name])
        for row, target in zip(X, y):
            writer.writerow([f"{v!r}" for v in row] + [f"{target!r}"])


def split_and_whiten(raw: RawTable, seed: int, name: str = "dataset",
                     truth: KernelModel | None = None) -> Dataset:
    """Seeded shuffle into 4/9 train, 2/9 validation, rest test, then
    standardize by training-split statistics (zero-variance feature
    columns get a unit divisor)."""
    X, y = raw.features, raw.target
    n = X.shape[0]
    if n < 9:
        raise ValueError(f"need at least 9 rows to split, got {n}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = (SPLIT_NINTHS[0] * n) // 9
    n_val = (SPLIT_NINTHS[1] * n) // 9
    train_idx = np.sort(order[:n_train])
    val_idx = np.sort(order[n_train:n_train + n_val])
    test_idx = np.sort(order[n_train + n_val:])

    f_mean = X[train_idx].mean(axis=0)
    f_std = X[train_idx].std(axis=0)
    f_std[f_std == 0.0] = 1.0
    t_mean = float(y[train_idx].mean())
    t_std = float(y[train_idx].std())
    if t_std == 0.0:
        t_std = 1.0

    return Dataset(
        name=name,
        X=(X - f_mean) / f_std,
        y=(y - t_mean) / t_std,
        train_idx=train_idx, val_idx=val_idx, test_idx=test_idx,
        feature_mean=f_mean, feature_std=f_std,
        target_mean=t_mean, target_std=t_std,
        truth=truth,
    )


def gen_synthetic(n: int, d: int, model: KernelModel, seed: int,
                  name: str = "synthetic") -> Dataset:
    """Draw a dataset from the GP prior itself.

    Inputs are uniform on the unit cube and targets are one joint draw
    from the noise-augmented prior, sampled densely through a Cholesky
    factor (jitter is added and the factorization retried if the matrix
    is numerically singular, e.g. at zero noise with repeated inputs).
    The generating model is recorded as ground truth.
    """
    if n > _SYNTHETIC_GUARD_N:
        raise ValueError(
            f"dense prior sampling guard: n={n} exceeds {_SYNTHETIC_GUARD_N}")
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, size=(n, d))
    y = sample_prior(model, X, rng)
    raw = RawTable(features=X, target=y,
                   feature_names=[f"x{i}" for i in range(d)],
                   target_name="target")
    return split_and_whiten(raw, seed, name=name, truth=model)


def sample_prior(model: KernelModel, X: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    """One draw y ~ N(mean, K + noise I) by dense factorization."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    K = kernels.kernel_block(model, X, X, add_noise=True)
    for jitter in (0.0, 1e-8, 1e-6):
        try:
            K_j = K if jitter == 0.0 else K + jitter * np.eye(n)
            L = scipy.linalg.cholesky(K_j, lower=True)
            break
        except scipy.linalg.LinAlgError:
            continue
    else:
        raise NumericError("prior covariance failed to factorize with jitter")
    return model.mean + L @ rng.standard_normal(n)
