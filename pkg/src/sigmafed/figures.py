"""Matplotlib renderings written next to the delimited report outputs.

Every figure is rendered through the Agg backend with fixed styling so a
rerun of the same command produces byte-identical image files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 120

plt.rcParams.update(
    {
        "figure.dpi": DPI,
        "savefig.dpi": DPI,
        "font.size": 9,
        "axes.titlesize": 9,
        "axes.labelsize": 8,
    }
)

__all__ = [
    "covariance_figure",
    "prior_draws_figure",
    "trace_figure",
    "posterior_band_figure",
    "field_comparison_figure",
    "difference_figure",
]


def _save(fig, path):
    fig.savefig(path, format="png")
    plt.close(fig)


def covariance_figure(path, phis, true_covs, emp_covs):
    """True covariance (top row) against the empirical covariance of the
    approximation draws (bottom row), one column per conditioning value."""
    n = len(phis)
    fig, axes = plt.subplots(2, n, figsize=(3.0 * n, 5.6))
    axes = np.atleast_2d(axes)
    if n == 1:
        axes = axes.reshape(2, 1)
    for col, (phi, kt, ke) in enumerate(zip(phis, true_covs, emp_covs)):
        vmax = max(float(np.max(kt)), float(np.max(ke)))
        vmin = min(float(np.min(kt)), float(np.min(ke)))
        axes[0, col].imshow(kt, vmin=vmin, vmax=vmax, cmap="viridis")
        axes[0, col].set_title(f"true, phi={phi:g}")
        im = axes[1, col].imshow(ke, vmin=vmin, vmax=vmax, cmap="viridis")
        axes[1, col].set_title(f"approximation, phi={phi:g}")
        fig.colorbar(im, ax=axes[:, col], fraction=0.04)
    _save(fig, path)


def prior_draws_figure(path, x, draws, phis, boundaries=()):
    """Overlaid draws colored by their conditioning value, with client
    boundaries marked."""
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    lo, hi = float(np.min(phis)), float(np.max(phis))
    span = (hi - lo) or 1.0
    cmap = plt.get_cmap("viridis")
    for row, phi in zip(draws, phis):
        ax.plot(x, row, lw=0.9, alpha=0.8, color=cmap((float(phi) - lo) / span))
    for b in boundaries:
        ax.axvline(b, color="red", ls="--", lw=1.0)
    ax.set_xlabel("location")
    ax.set_ylabel("draw value")
    sm = plt.cm.ScalarMappable(cmap=cmap, norm=plt.Normalize(lo, hi))
    fig.colorbar(sm, ax=ax, label="phi")
    _save(fig, path)


def trace_figure(path, trace, smoothed):
    fig, ax = plt.subplots(figsize=(7.0, 3.5))
    ax.plot(np.arange(trace.size), trace, lw=0.4, alpha=0.4, label="per-iteration")
    ax.plot(np.arange(smoothed.size), smoothed, lw=1.4, label="smoothed")
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective")
    ax.legend(loc="lower right")
    _save(fig, path)


def posterior_band_figure(path, x, mean, lo, hi, obs_x=None, obs_y=None, boundaries=()):
    """Posterior mean with its 90% band and the observations (1-d grids)."""
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    ax.fill_between(x, lo, hi, alpha=0.3, color="C0", label="90% interval")
    ax.plot(x, mean, color="C0", lw=1.5, label="posterior mean")
    if obs_x is not None and len(obs_x):
        ax.plot(obs_x, obs_y, "k.", ms=6, label="observations")
    for b in boundaries:
        ax.axvline(b, color="red", ls="--", lw=1.0)
    ax.set_xlabel("location")
    ax.set_ylabel("field value")
    ax.legend(loc="best")
    _save(fig, path)


def field_comparison_figure(path, mean, sd, obs_values=None):
    """Posterior mean with +-1.645 sd bars over coordinate index (graph
    fields without a natural 1-d embedding)."""
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    idx = np.arange(mean.size)
    ax.errorbar(idx, mean, yerr=1.645 * sd, fmt=".", ms=4, lw=0.7, label="posterior")
    if obs_values is not None and len(obs_values) == mean.size:
        ax.plot(idx, obs_values, "kx", ms=4, label="observations")
    ax.set_xlabel("coordinate")
    ax.set_ylabel("field value")
    ax.legend(loc="best")
    _save(fig, path)


def difference_figure(path, diffs_by_label):
    """Per-coordinate differences from the oracle mean for one or more
    posterior variants, side by side."""
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    for k, (label, d) in enumerate(diffs_by_label.items()):
        idx = np.arange(len(d))
        ax.plot(idx, d, ".", ms=4, color=f"C{k}", label=label)
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xlabel("coordinate")
    ax.set_ylabel("posterior mean - oracle mean")
    ax.legend(loc="best")
    _save(fig, path)
