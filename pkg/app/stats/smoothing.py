"""Kernel density estimation and lowess."""
import math
from collections.abc import Sequence

import numpy as np
import pandas as pd

from app.core.exceptions import InsufficientDataError

# normal-scale rule constant for the Epanechnikov kernel
EPANECHNIKOV_SCALE = 2.34


def normal_scale_bandwidth(values: np.ndarray) -> float:
    """h = 2.34 · min(sd, IQR / 1.349) · n^(-1/5)."""
    sd = float(np.std(values, ddof=1))
    q75, q25 = np.percentile(values, [75, 25])
    iqr = (q75 - q25) / 1.349
    spread = min(sd, iqr) if iqr > 0 else sd
    if spread <= 0:
        raise InsufficientDataError("bandwidth undefined for zero-variance input")
    return EPANECHNIKOV_SCALE * spread * len(values) ** (-0.2)


class EpanechnikovKDE:
    def __init__(self, values: Sequence[float], bandwidth: float | None = None):
        self.values = np.sort(np.asarray(values, dtype=float))
        if len(self.values) < 2 and bandwidth is None:
            raise InsufficientDataError("density estimation needs at least two values")
        if len(self.values) == 0:
            raise InsufficientDataError("density estimation needs values")
        self.bandwidth = normal_scale_bandwidth(self.values) if bandwidth is None else float(bandwidth)
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")

    def __call__(self, x: Sequence[float] | float) -> np.ndarray:
        points = np.atleast_1d(np.asarray(x, dtype=float))
        h, n = self.bandwidth, len(self.values)
        density = np.empty(len(points))
        # only values within one bandwidth contribute
        lo = np.searchsorted(self.values, points - h, side="left")
        hi = np.searchsorted(self.values, points + h, side="right")
        for i, (point, a, b) in enumerate(zip(points, lo, hi)):
            u = (point - self.values[a:b]) / h
            density[i] = np.sum(0.75 * (1.0 - u * u)) / (n * h)
        return np.clip(density, 0.0, None)

    @property
    def support(self) -> tuple[float, float]:
        return float(self.values[0] - self.bandwidth), float(self.values[-1] + self.bandwidth)

    def grid(self, n_points: int = 512) -> pd.DataFrame:
        lo, hi = self.support
        x = np.linspace(lo, hi, n_points)
        return pd.DataFrame({"x": x, "density": self(x)})


def kde_epanechnikov(values: Sequence[float], bandwidth: float | None = None) -> EpanechnikovKDE:
    return EpanechnikovKDE(values, bandwidth)


def _tricube(u: np.ndarray) -> np.ndarray:
    return (1.0 - np.clip(np.abs(u), 0.0, 1.0) ** 3) ** 3


def lowess(
    x: Sequence[float],
    y: Sequence[float],
    f: float = 0.5,
    robust_iterations: int = 0,
) -> np.ndarray:
    """Locally weighted linear fit at every x over its ceil(f·n) nearest neighbours.

    Tricube weights; a neighbourhood without spread in x falls back to the
    weighted mean. Robustness iterations reweight by the bisquare of the
    residuals over six median absolute residuals.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if len(y) != n:
        raise ValueError("x and y must have the same length")
    if n < 3:
        raise InsufficientDataError("lowess needs at least three points")
    if not 0 < f <= 1:
        raise ValueError("f must lie in (0, 1]")

    r = min(n, max(2, math.ceil(f * n)))
    robustness = np.ones(n)
    fitted = np.empty(n)
    for iteration in range(robust_iterations + 1):
        for i in range(n):
            distances = np.abs(x - x[i])
            h = np.partition(distances, r - 1)[r - 1]
            local = _tricube(distances / h) if h > 0 else (distances == 0).astype(float)
            w = local * robustness
            total = w.sum()
            if total <= 0:
                fitted[i] = y[i]
                continue
            mean_x, mean_y = (w @ x) / total, (w @ y) / total
            spread = w @ (x - mean_x) ** 2
            if spread <= 1e-12 * max(1.0, total * mean_x**2):
                fitted[i] = mean_y
            else:
                slope = (w @ ((x - mean_x) * (y - mean_y))) / spread
                fitted[i] = mean_y + slope * (x[i] - mean_x)
        if iteration == robust_iterations:
            break
        residuals = y - fitted
        scale = np.median(np.abs(residuals))
        if scale == 0:
            break
        robustness = (1.0 - np.clip(residuals / (6.0 * scale), -1.0, 1.0) ** 2) ** 2
    return fitted


def lowess_frame(x: Sequence[float], y: Sequence[float], f: float = 0.5, robust_iterations: int = 0) -> pd.DataFrame:
    """Fitted curve sorted by x, one row per input point."""
    fitted = lowess(x, y, f, robust_iterations)
    frame = pd.DataFrame({"x": np.asarray(x, dtype=float), "fitted": fitted})
    return frame.sort_values("x", kind="mergesort").reset_index(drop=True)
