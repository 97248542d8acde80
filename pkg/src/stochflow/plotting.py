"""Figures written next to the CSV/JSON outputs of an experiment run."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    # no timestamps so reruns write identical files
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def line_series(path, times, series: dict, xlabel: str = "t", ylabel: str = "",
                title: str = "", logy: bool = False) -> Path:
    """One or more curves against time."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, y in series.items():
            ax.plot(times, y, marker=".", label=label)
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if len(series) > 1:
            ax.legend()
        return _save(fig, Path(path))


def martingale_band(path, times, mean, se, title: str = "") -> Path:
    """Monte Carlo mean with a 3-SE band and the initial value as reference."""
    times, mean, se = (np.asarray(a, dtype=float) for a in (times, mean, se))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.fill_between(times, mean - 3 * se, mean + 3 * se, alpha=0.25, label="mean +/- 3 SE")
        ax.plot(times, mean, marker="o", label="mean")
        ax.axhline(mean[0], color="k", lw=0.8, ls="--", label="t = 0")
        ax.set_xlabel("t")
        ax.set_ylabel("surface integral")
        if title:
            ax.set_title(title)
        ax.legend()
        return _save(fig, Path(path))


def z_bars(path, labels, z, threshold: float = 3.0, title: str = "") -> Path:
    """Bar chart of z-statistics with the acceptance band."""
    z = np.asarray(z, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(range(len(z)), z)
        ax.axhline(threshold, color="r", lw=0.8, ls="--")
        ax.axhline(-threshold, color="r", lw=0.8, ls="--")
        ax.set_xticks(range(len(z)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
        ax.set_ylabel("z")
        if title:
            ax.set_title(title)
        return _save(fig, Path(path))


def scatter_compare(path, x, y, xlabel: str, ylabel: str, title: str = "") -> Path:
    """Scatter of two estimates with the diagonal."""
    x, y = np.asarray(x, float).ravel(), np.asarray(y, float).ravel()
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.scatter(x, y, s=12)
        lo, hi = min(x.min(), y.min()), max(x.max(), y.max())
        ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        return _save(fig, Path(path))


def probe_residuals(path, values: dict, title: str = "", floor: float = 1e-18) -> Path:
    """Per-probe residuals on a log scale, one marker set per quantity."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, v in values.items():
            v = np.maximum(np.abs(np.asarray(v, dtype=float)).ravel(), floor)
            ax.semilogy(np.arange(v.size), v, ".", label=label)
        ax.set_xlabel("probe")
        ax.set_ylabel("residual")
        if title:
            ax.set_title(title)
        ax.legend(fontsize=7)
        return _save(fig, Path(path))
