"""Small statistics helpers: confidence intervals and least-squares fits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats


def wilson(k: int, n: int, conf: float = 0.95, sided: int = 2) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion k/n.

    With ``sided=1`` the returned upper (and lower) limits are one-sided
    bounds at level ``conf``.
    """
    if n <= 0:
        return (0.0, 1.0)
    alpha = 1 - conf
    z = stats.norm.ppf(1 - alpha / sided)
    p = k / n
    denom = 1 + z**2 / n
    centre = (p + z**2 / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / denom
    return (max(0.0, centre - half), min(1.0, centre + half))


@dataclass
class MeanCI:
    mean: float
    se: float
    n: int
    conf: float = 0.95

    @property
    def halfwidth(self) -> float:
        return float(stats.norm.ppf(0.5 + self.conf / 2) * self.se)

    @property
    def lo(self) -> float:
        return self.mean - self.halfwidth

    @property
    def hi(self) -> float:
        return self.mean + self.halfwidth

    def as_dict(self) -> dict:
        return {"estimate": self.mean, "se": self.se, "ci": [self.lo, self.hi], "n": self.n}


def mean_ci(x, conf: float = 0.95) -> MeanCI:
    x = np.asarray(x, dtype=float)
    n = x.size
    se = float(x.std(ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    return MeanCI(float(x.mean()), se, n, conf)


def batch_means(x, batches: int = 20, conf: float = 0.95) -> MeanCI:
    """Mean of a correlated series with a batch-means standard error.

    ``x`` may carry a leading replica axis (independent chains); batches are
    formed along the last axis and pooled across chains.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    L = x.shape[-1] // batches
    if L < 1:
        raise ValueError("series shorter than the number of batches")
    b = x[..., : L * batches].reshape(x.shape[:-1] + (batches, L)).mean(axis=-1).ravel()
    return MeanCI(float(b.mean()), float(b.std(ddof=1) / np.sqrt(b.size)), int(x.size), conf)


@dataclass
class LinearFit:
    slope: float
    intercept: float
    slope_se: float
    r2: float
    n: int

    def slope_ci(self, conf: float = 0.95) -> tuple[float, float]:
        if self.n <= 2:
            return (self.slope, self.slope)
        q = stats.t.ppf(0.5 + conf / 2, self.n - 2)
        return (self.slope - q * self.slope_se, self.slope + q * self.slope_se)

    def as_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "slope_se": self.slope_se,
                "r2": self.r2, "n": self.n}


def linear_fit(x, y, sigma=None) -> LinearFit:
    """Ordinary (or weighted, with ``sigma``) least squares y = a + b x.

    With ``sigma`` the slope error combines the propagated measurement error
    and the residual scatter (whichever is larger).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    w = np.ones(n) if sigma is None else 1.0 / np.maximum(np.asarray(sigma, float), 1e-300) ** 2
    W = w.sum()
    xm = (w * x).sum() / W
    ym = (w * y).sum() / W
    sxx = (w * (x - xm) ** 2).sum()
    slope = (w * (x - xm) * (y - ym)).sum() / sxx
    intercept = ym - slope * xm
    res = y - intercept - slope * x
    ss_tot = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - (res**2).sum() / ss_tot if ss_tot > 0 else 1.0
    if n > 2:
        if sigma is None:
            se = np.sqrt((res**2).sum() / (n - 2) / sxx)
        else:
            chi2 = (w * res**2).sum() / (n - 2)
            se = np.sqrt(max(chi2, 1.0) / sxx)
    else:
        se = 0.0 if sigma is None else np.sqrt(1.0 / sxx)
    return LinearFit(float(slope), float(intercept), float(se), float(r2), n)
