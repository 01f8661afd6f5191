"""Figure rendering for the CLI report path.

All figures are rendered headlessly to files next to the CSV output; nothing
here feeds back into the numerics.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "save_spectrum",
    "save_mask",
    "save_fit",
    "save_design",
    "save_curve",
    "save_history",
]


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return str(path)


def save_spectrum(lams, path) -> str:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(np.arange(1, len(lams) + 1), lams, "o-", ms=4)
    ax.set_xlabel("mode index")
    ax.set_ylabel("eigenvalue")
    ax.set_title("Stokes spectrum")
    return _finish(fig, path)


def save_mask(indicator, extent, path, title="mask") -> str:
    fig, ax = plt.subplots(figsize=(4.2, 4.2 * extent[3] / extent[1]))
    ax.imshow(np.asarray(indicator, dtype=float).T, origin="lower",
              extent=extent, cmap="Greys", vmin=0, vmax=1, aspect="equal")
    ax.set_title(title)
    return _finish(fig, path)


def save_fit(x, y, slope, intercept, path, xlabel, ylabel) -> str:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(x, y, "o", label="data")
    xs = np.linspace(min(x), max(x), 50)
    ax.plot(xs, slope * xs + intercept, "-", label=f"fit slope {slope:.3g}")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    return _finish(fig, path)


def save_design(values, extent, path) -> str:
    fig, ax = plt.subplots(figsize=(4.6, 4.0 * extent[3] / extent[1]))
    im = ax.imshow(np.asarray(values, dtype=float).T, origin="lower",
                   extent=extent, cmap="viridis", vmin=0, vmax=1, aspect="equal")
    fig.colorbar(im, ax=ax, label="density")
    ax.set_title("relaxed sensor design")
    return _finish(fig, path)


def save_curve(points, path, xlabel, ylabel, logy=False) -> str:
    pts = sorted(points)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    return _finish(fig, path)


def save_history(history, path) -> str:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ks = [h[0] for h in history]
    vs = [h[1] for h in history]
    shift = min(vs)
    ax.semilogy(ks, [v - shift + 1e-16 for v in vs])
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective - best")
    ax.set_title("dual descent")
    return _finish(fig, path)
