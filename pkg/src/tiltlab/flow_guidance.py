"""Velocity guidance for the linear interpolation path.

The guided velocity toward the reward-tilted target is the conditional
velocity averaged under the reward-reweighted endpoint posterior.  Two
estimators are provided: the exact conjugate/quadrature form, and a
training-free self-normalized importance-sampling form whose proposals
are plain draws from the data distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .guidance import (
    LOG_WEIGHT_FLOOR,
    DegenerateWeightsError,
    _quad_log_numerators,
    _tilted_component_stats,
)
from .mixtures import (
    FLOW_T_CLAMP,
    GaussianMixture,
    gaussian_observation_posterior,
    gm_sample,
    fm_marginal_velocity,
)
from .nets import Mlp, adam_init, adam_step, init_mlp, mlp_forward, mlp_grad_params, net_params
from .rewards import Reward, is_conjugate
from .utils import softmax_rows

__all__ = [
    "FlowGuidanceSource",
    "fm_guided_velocity_exact",
    "fm_guided_velocity_is",
    "guided_velocity",
    "train_flow_guidance_nets",
    "two_net_velocity",
]


def _as_rows(x: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ValueError(f"point has dimension {x.shape[0]}, expected {dim}")
        return x[None, :], True
    return x, False


def _check_flow_time(t: float, eps: float = FLOW_T_CLAMP) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0 - eps:
        raise ValueError(f"flow time {t} outside [0, {1.0 - eps}]")
    return t


@dataclass(frozen=True)
class FlowGuidanceSource:
    """Velocity guidance choice: none, exact, or training_free_is."""

    method: str = "exact"
    K: int = 4096
    eps: float = 1e-3  # integration clamp before t = 1
    seed: int = 0

    VALID = ("none", "exact", "training_free_is")

    def __post_init__(self):
        if self.method not in self.VALID:
            raise ValueError(f"unknown flow guidance method {self.method!r}")
        if self.K < 2:
            raise ValueError("training-free estimator needs K >= 2")
        if not 0.0 < self.eps <= 1e-2:
            raise ValueError("clamp must lie in (0, 1e-2]")


def fm_guided_velocity_exact(
    gm: GaussianMixture, r: Reward, y: int, x_t: np.ndarray, t: float
) -> np.ndarray:
    """Exact velocity toward the tilted target.

    The correction reweights the endpoint posterior by exp(r/beta); for
    conjugate rewards the reweighted posterior stays a Gaussian mixture
    whose mean is closed-form, otherwise a quadrature grid over the data
    distribution is used (d <= 2).
    """
    t = _check_flow_time(t)
    xb, squeeze = _as_rows(x_t, gm.dim)
    noise_var = (1.0 - t) ** 2
    if is_conjugate(r):
        parts = gaussian_observation_posterior(gm, t, noise_var, xb)
        log_mgf, tilted = _tilted_component_stats(parts.means, parts.covs, r)
        rho = softmax_rows(parts.log_resp + log_mgf, axis=1)
        endpoint = np.sum(rho[:, :, None] * tilted, axis=1)
    else:
        pts, log_num = _quad_log_numerators(gm, t, noise_var, r, xb)
        rho = softmax_rows(log_num, axis=1)
        endpoint = rho @ pts
    v = (endpoint - xb) / (1.0 - t)
    return v[0] if squeeze else v


def fm_guided_velocity_is(
    gm: GaussianMixture,
    r: Reward,
    y: int,
    x_t: np.ndarray,
    t: float,
    K: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Training-free estimate from marginal data draws.

    Path-kernel likelihoods give self-normalized weights; the reward
    ratio against the weighted normalizer forms the correction, all of it
    assembled through shifted log-sum-exp.  Returns the guided velocity
    and the effective sample size per query point.
    """
    if K < 2:
        raise ValueError("need at least 2 proposal samples")
    t = _check_flow_time(t)
    xb, squeeze = _as_rows(x_t, gm.dim)
    rng = np.random.default_rng(seed)
    x1 = gm_sample(gm, K, rng)
    d = gm.dim
    noise_var = (1.0 - t) ** 2
    # squared distances |x - t z|^2 assembled without an (n, K, d) temporary
    sq = (
        np.sum(xb**2, axis=1)[:, None]
        - 2.0 * t * (xb @ x1.T)
        + t * t * np.sum(x1**2, axis=1)[None, :]
    )
    ell = -0.5 * sq / noise_var - 0.5 * d * np.log(2.0 * np.pi * noise_var)
    max_ell = np.max(ell, axis=1)
    if not np.all(np.isfinite(max_ell)) or np.min(max_ell) < LOG_WEIGHT_FLOOR:
        raise DegenerateWeightsError(
            f"all path-kernel weights underflowed (max log-weight {np.min(max_ell):.3e})"
        )
    w = softmax_rows(ell, axis=1)
    ess = 1.0 / np.sum(w * w, axis=1)  # (sum u)^2 / sum u^2 with normalized rows
    rv = np.asarray(r.value(x1)) / r.beta
    # the estimator is invariant to constant reward shifts; after shifting
    # by max(rv) a constant reward leaves every factor at 1 and the
    # correction vanishes identically
    rv_max = np.max(rv)
    erv = np.exp(rv - rv_max)
    v = fm_marginal_velocity(gm, t, xb)
    if not np.all(erv == 1.0):
        # ratio exp(rv_k)/D-hat as an outer product of one-dimensional parts
        dhat_shifted = w @ erv
        wr = w * erv[None, :] / dhat_shifted[:, None] - w
        v = v + (wr @ x1 - np.sum(wr, axis=1)[:, None] * xb) / (1.0 - t)
    if squeeze:
        return v[0], float(ess[0])
    return v, ess


def guided_velocity(
    source: FlowGuidanceSource,
    gm: GaussianMixture,
    r: Reward | None,
    y: int,
    x_t: np.ndarray,
    t: float,
    seed: int | None = None,
    stats: dict | None = None,
) -> np.ndarray:
    """Dispatch on the source tag; records ESS diagnostics when sampling."""
    if source.method == "none":
        return fm_marginal_velocity(gm, t, x_t)
    if source.method == "exact":
        return fm_guided_velocity_exact(gm, r, y, x_t, t)
    v, ess = fm_guided_velocity_is(
        gm, r, y, x_t, t, source.K, source.seed if seed is None else seed
    )
    if stats is not None:
        mean_ess = float(np.mean(np.atleast_1d(ess)))
        stats.setdefault("ess", []).append(mean_ess)
        if mean_ess / source.K < 0.01:
            stats["low_ess_steps"] = stats.get("low_ess_steps", 0) + 1
    return v


# ----------------------------------------------------------------------
# Optional two-network training route (experimental; the training-free
# estimator above is the supported path)
# ----------------------------------------------------------------------


def train_flow_guidance_nets(
    gm: GaussianMixture,
    r: Reward,
    y: int,
    epochs: int = 10,
    samples_per_epoch: int = 4096,
    batch: int = 32,
    learning_rate: float = 2e-3,
    seed: int = 0,
    hidden: tuple[int, ...] = (64, 64),
    eps: float = 1e-3,
) -> tuple[Mlp, Mlp]:
    """Fit the normalizer network and the correction-field network.

    First network: positive scalar regression of exp(r/beta) on (x_t, t).
    Second network: vector regression of (exp(r/beta)/normalizer - 1)
    times the conditional velocity.  Errors of the two fits compound, so
    this route is an experiment, not the supported estimator.
    """
    rng = np.random.default_rng(seed)
    d = gm.dim
    in_dim = d + 2  # state plus (sin, cos) phase of the flow time
    net1 = init_mlp([in_dim, *hidden, 1], head="exp", seed=seed)
    net2 = init_mlp([in_dim, *hidden, d], head="identity", seed=seed + 1)

    def encode(x, ts):
        phase = np.pi * np.asarray(ts)
        return np.concatenate([x, np.stack([np.sin(phase), np.cos(phase)], axis=1)], axis=1)

    def fit(net, target_of_batch):
        params = net_params(net)
        state = adam_init(params, lr=learning_rate)
        for _ in range(epochs):
            x1 = gm_sample(gm, samples_per_epoch, rng)
            ts = rng.uniform(0.0, 1.0 - eps, size=samples_per_epoch)
            x0 = rng.standard_normal((samples_per_epoch, d))
            xt = (1.0 - ts)[:, None] * x0 + ts[:, None] * x1
            feats = encode(xt, ts)
            target = target_of_batch(x1, xt, ts, feats)
            for lo in range(0, samples_per_epoch, batch):
                hi = min(lo + batch, samples_per_epoch)
                B = hi - lo
                out = mlp_forward(net, feats[lo:hi])
                gw, gb = mlp_grad_params(net, feats[lo:hi], 2.0 * (out - target[lo:hi]) / B)
                grads = []
                for w_g, b_g in zip(gw, gb):
                    grads.append(w_g)
                    grads.append(b_g)
                adam_step(state, params, grads)

    fit(net1, lambda x1, xt, ts, feats: np.exp(np.asarray(r.value(x1)) / r.beta))

    def correction_target(x1, xt, ts, feats):
        expr = np.exp(np.asarray(r.value(x1)) / r.beta)
        norm = mlp_forward(net1, feats)
        cond_v = (x1 - xt) / (1.0 - ts)[:, None]
        return (expr / norm - 1.0)[:, None] * cond_v

    fit(net2, correction_target)
    return net1, net2


def two_net_velocity(
    net1: Mlp, net2: Mlp, gm: GaussianMixture, x_t: np.ndarray, t: float
) -> np.ndarray:
    """Base velocity plus the learned correction field."""
    xb, squeeze = _as_rows(x_t, gm.dim)
    phase = np.pi * t
    feats = np.concatenate(
        [xb, np.tile([np.sin(phase), np.cos(phase)], (xb.shape[0], 1))], axis=1
    )
    v = fm_marginal_velocity(gm, t, xb) + mlp_forward(net2, feats)
    return v[0] if squeeze else v
