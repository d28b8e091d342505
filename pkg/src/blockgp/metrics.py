"""Test-split metrics on the standardized scale.

RMSE is root-mean-square error of the predictive mean; NLL is the average
Gaussian negative log density under the observed (noise-added) predictive
variance. On standardized targets, predicting the training mean scores an
RMSE near 1, which anchors the scale of reported numbers.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset


@dataclass
class ExperimentResult:
    dataset: str
    method: str
    seed: int
    rmse: float
    nll: float
    train_seconds: float
    pred_ms_per_1000: float
    extras: dict = field(default_factory=dict)
    status: str = "ok"
    error: str = ""


def rmse(mean: np.ndarray, y: np.ndarray) -> float:
    mean = np.asarray(mean, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.sqrt(np.mean((mean - y) ** 2)))


def nll_gaussian(mean: np.ndarray, observed_variance: np.ndarray,
                 y: np.ndarray) -> float:
    mean = np.asarray(mean, dtype=np.float64)
    v = np.asarray(observed_variance, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(v <= 0):
        raise ValueError("observed variance must be positive")
    return float(np.mean(0.5 * np.log(2.0 * math.pi * v)
                         + (y - mean) ** 2 / (2.0 * v)))


def evaluate(predictor, dataset: Dataset, *, seed: int = 0,
             method: str = "unknown", train_seconds: float = float("nan"),
             extras: dict | None = None) -> ExperimentResult:
    """Score a fitted artifact on the dataset's test split.

    predictor must expose predict(X) returning an object with mean and
    observed_variance arrays. Prediction wall time is recorded as
    milliseconds per 1,000 test points.
    """
    started = time.perf_counter()
    out = predictor.predict(dataset.X_test)
    elapsed = time.perf_counter() - started
    m = dataset.X_test.shape[0]
    result = ExperimentResult(
        dataset=dataset.name,
        method=method,
        seed=seed,
        rmse=rmse(out.mean, dataset.y_test),
        nll=nll_gaussian(out.mean, out.observed_variance, dataset.y_test),
        train_seconds=train_seconds,
        pred_ms_per_1000=1000.0 * elapsed / m * 1000.0,
        extras=dict(extras or {}),
    )
    clamped = getattr(out, "clamped", 0)
    if clamped:
        result.extras["variance_clamped"] = clamped
    return result
