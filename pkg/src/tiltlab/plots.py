"""Figure rendering for run reports: samples against the exact target."""

from __future__ import annotations

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .rewards import TiltedDistribution

__all__ = ["render_report_figure"]


def render_report_figure(
    samples: np.ndarray, target: TiltedDistribution, path, annotation: str = ""
) -> None:
    """Write an SVG of the sample batch over the target density.

    1D runs get a histogram with the density curve; 2D runs get a
    scatter over density contours.  Higher dimensions are skipped.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    d = samples.shape[1]
    if d > 2:
        return
    fig, ax = plt.subplots(figsize=(6, 4))
    if d == 1:
        lo = float(samples.min()) - 1.0
        hi = float(samples.max()) + 1.0
        grid = np.linspace(lo, hi, 512)[:, None]
        dens = np.exp(target.log_density(grid))
        ax.hist(samples[:, 0], bins=80, density=True, alpha=0.45, label="samples")
        ax.plot(grid[:, 0], dens, lw=1.5, label="target density")
        ax.set_xlabel("x")
        ax.set_ylabel("density")
    else:
        lo = samples.min(axis=0) - 1.0
        hi = samples.max(axis=0) + 1.0
        xs = np.linspace(lo[0], hi[0], 160)
        ys = np.linspace(lo[1], hi[1], 160)
        xx, yy = np.meshgrid(xs, ys)
        pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
        dens = np.exp(target.log_density(pts)).reshape(xx.shape)
        ax.contour(xx, yy, dens, levels=8, linewidths=0.8)
        step = max(1, samples.shape[0] // 4000)
        ax.scatter(samples[::step, 0], samples[::step, 1], s=4, alpha=0.35, label="samples")
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
    ax.legend(loc="upper left", fontsize=8)
    if annotation:
        ax.set_title(annotation, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
