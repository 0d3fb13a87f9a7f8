"""Tensor-product trapezoid quadrature in log space (d <= 2).

The oracle grids follow one convention throughout the package: trapezoid
rule over mean +/- 10 standard deviations with 2048 nodes per axis.
"""

from __future__ import annotations

import numpy as np

from .mixtures import GaussianMixture, gm_mean_cov

__all__ = ["grid_for_mixture", "log_trapz", "log_integrate_grid"]

DEFAULT_NODES = 2048
DEFAULT_SPAN = 10.0


def grid_for_mixture(
    gm: GaussianMixture, nodes: int = DEFAULT_NODES, span: float = DEFAULT_SPAN
) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature nodes (n, d) and log trapezoid weights (n,) covering the mixture.

    The box spans ``span`` marginal standard deviations past the most
    extreme component means on each axis.
    """
    d = gm.dim
    if d > 2:
        raise ValueError("quadrature grids are only provided for d <= 2")
    _, cov = gm_mean_cov(gm)
    sd = np.sqrt(np.diag(cov))
    lo = gm.means.min(axis=0) - span * sd
    hi = gm.means.max(axis=0) + span * sd
    axes = [np.linspace(lo[k], hi[k], nodes) for k in range(d)]
    logw_axes = []
    for ax in axes:
        h = ax[1] - ax[0]
        w = np.full(nodes, h)
        w[0] = w[-1] = 0.5 * h
        logw_axes.append(np.log(w))
    if d == 1:
        return axes[0][:, None], logw_axes[0]
    xx, yy = np.meshgrid(axes[0], axes[1], indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    logw = (logw_axes[0][:, None] + logw_axes[1][None, :]).ravel()
    return pts, logw


def log_trapz(log_f: np.ndarray, x: np.ndarray) -> float:
    """log integral of exp(log_f) over a 1D grid x by the trapezoid rule."""
    h = np.diff(x)
    shift = np.max(log_f)
    f = np.exp(log_f - shift)
    return float(shift + np.log(np.sum(0.5 * (f[1:] + f[:-1]) * h)))


def log_integrate_grid(log_f: np.ndarray, log_w: np.ndarray) -> float:
    """log sum of exp(log_f + log_w) for precomputed grid weights."""
    a = log_f + log_w
    shift = np.max(a)
    return float(shift + np.log(np.sum(np.exp(a - shift))))
