"""Small Monte Carlo summaries used by the martingale diagnostics."""

from __future__ import annotations

import numpy as np


def mean_se(samples, axis: int = 0):
    """Sample mean and standard error along ``axis``."""
    s = np.asarray(samples, dtype=float)
    n = s.shape[axis]
    mean = s.mean(axis=axis)
    if n < 2:
        return mean, np.full_like(mean, np.nan)
    return mean, s.std(axis=axis, ddof=1) / np.sqrt(n)


def z_score(mean, se):
    """``mean / se`` with ``0/0 -> 0`` and ``x/0 -> inf``."""
    mean = np.asarray(mean, dtype=float)
    se = np.asarray(se, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = mean / se
    z = np.where((se == 0) & (mean == 0), 0.0, z)
    z = np.where((se == 0) & (mean != 0), np.inf, z)
    return z


def paired_z(a, b, axis: int = 0):
    """z-statistic of the per-sample differences ``b - a``."""
    m, se = mean_se(np.asarray(b) - np.asarray(a), axis=axis)
    return z_score(m, se), m, se


def pairwise_z(values) -> np.ndarray:
    """Matrix ``Z[s, t]`` of paired z-statistics between columns ``s < t``.

    ``values`` has shape ``(n_samples, n_times)``; entries with ``s >= t`` are 0.
    """
    v = np.asarray(values, dtype=float)
    c = v.shape[1]
    out = np.zeros((c, c))
    for s in range(c):
        for t in range(s + 1, c):
            out[s, t] = paired_z(v[:, s], v[:, t])[0]
    return out


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])
