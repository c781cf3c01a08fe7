"""Matplotlib renderings of experiment results (files only, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings in the files, so reruns are byte-identical
PNG_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)
    return path


def _axis_values(sweep):
    """Scalar x coordinate for a sweep: the parameter itself, or the position along a line."""
    grid = sweep.mu_grid
    if grid.shape[1] == 1:
        return grid[:, 0], "mu"
    steps = np.linalg.norm(np.diff(grid, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)]) / max(steps.sum(), 1e-12), "position along grid"


def plot_performance(sweeps: dict, path, title: str = "", threshold=None, ylabel: str = "performance"):
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, sw in sweeps.items():
        x, xlabel = _axis_values(sw)
        m, s = sw.mean_perf, sw.std_perf
        ax.plot(x, m, marker="o", ms=3, label=label)
        ax.fill_between(x, m - s, m + s, alpha=0.2)
    if threshold is not None:
        ax.axhline(threshold, color="k", lw=0.8, ls="--")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def plot_estimates(sweep, path, title: str = ""):
    """Identifier estimate against the true parameter, one panel per component."""
    d = sweep.mu_grid.shape[1]
    fig, axes = plt.subplots(1, d, figsize=(4.5 * d, 4), squeeze=False)
    for j in range(d):
        ax = axes[0, j]
        t = sweep.mu_grid[:, j]
        m, s = sweep.mean_mu_hat[:, j], sweep.std_mu_hat[:, j]
        ax.errorbar(t, m, yerr=s, fmt="o", ms=3, capsize=2)
        lo, hi = min(t.min(), np.nanmin(m)), max(t.max(), np.nanmax(m))
        ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
        ax.set_xlabel(f"true mu[{j}]")
        ax.set_ylabel(f"estimated mu[{j}]")
    fig.suptitle(title)
    return _save(fig, path)


def plot_rounds(rows, path, title: str = ""):
    """Per-round identifier statistics (held-out error and UP-OSI performance)."""
    it = [r["iteration"] for r in rows]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
    a1.plot(it, [r["heldout_mse"] for r in rows], marker="o")
    a1.set_xlabel("round")
    a1.set_ylabel("held-out MSE")
    a2.plot(it, [r["up_osi_perf"] for r in rows], marker="o")
    a2.set_xlabel("round")
    a2.set_ylabel("UP-OSI performance")
    fig.suptitle(title)
    return _save(fig, path)


def plot_training(rows, path, title: str = ""):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([r["iteration"] for r in rows], [r["mean_return"] for r in rows])
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean episode return")
    ax.set_title(title)
    return _save(fig, path)


def plot_friction(result, path, title: str = ""):
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
    labels = list(result.distance)
    width = 0.8 / max(len(labels), 1)
    x = np.arange(result.mu_vary.size)
    for i, label in enumerate(labels):
        d = result.distance[label]
        a1.bar(x + i * width, d.mean(axis=1), width, yerr=d.std(axis=1), label=label)
    a1.set_xticks(x + 0.4 - width / 2)
    a1.set_xticklabels([f"{m:g}" for m in result.mu_vary])
    a1.set_xlabel("friction inside region")
    a1.set_ylabel("distance (m)")
    a1.legend()
    if result.trace:
        t = result.trace["time"]
        a2.plot(t, result.trace["mu_true"], label="true")
        a2.plot(t, result.trace["mu_hat"], label="estimated")
        a2.set_xlabel("time (s)")
        a2.set_ylabel("friction")
        a2.legend()
    fig.suptitle(title)
    return _save(fig, path)
