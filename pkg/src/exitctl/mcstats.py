"""Monte-Carlo estimator summaries shared by the estimator modules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EstimatorResult:
    """Sample mean with its dispersion; std_error = sqrt(variance / n_samples)."""

    mean: float
    variance: float
    std_error: float
    n_samples: int
    n_discarded: int = 0

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("variance must be nonnegative")

    def agrees_with(self, other: "EstimatorResult | float", n_se: float = 3.0) -> bool:
        """Two-sided comparison within n_se combined standard errors."""
        if isinstance(other, EstimatorResult):
            gap = abs(self.mean - other.mean)
            se = math.hypot(self.std_error, other.std_error)
        else:
            gap = abs(self.mean - float(other))
            se = self.std_error
        return gap <= n_se * se


def summarize(values: np.ndarray, n_discarded: int = 0) -> EstimatorResult:
    """Plain MC summary of per-path values."""
    values = np.asarray(values, dtype=float)
    n = values.size
    if n == 0:
        raise ValueError("empty sample")
    mean = float(values.mean())
    var = float(values.var(ddof=1)) if n > 1 else 0.0
    return EstimatorResult(mean, var, math.sqrt(var / n), n, n_discarded)
