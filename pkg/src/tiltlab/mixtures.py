"""Closed-form Gaussian-mixture models and their diffusion / flow quantities.

Everything the rest of the package treats as a "pre-trained model" lives
here: mixture densities and scores, the variance-preserving noise
schedule, forward perturbation of a mixture to any time, the exact
denoising posterior, and the marginal velocity of the linear
interpolation path.

Conventions
-----------
Diffusion time runs over [0, T] with data at t=0 and noise at t=T.
The flow-matching path runs over [0, 1] with noise at t=0 and data at
t=1.  The two conventions are deliberately kept separate.

All operations are pure functions over immutable inputs and accept
either a single point of shape ``(d,)`` or a batch of shape ``(n, d)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

__all__ = [
    "GaussianMixture",
    "NoiseSchedule",
    "GaussianPosterior",
    "gm_log_density",
    "gm_score",
    "gm_hessian_log_density",
    "gm_sample",
    "gm_mean_cov",
    "diffuse_marginal",
    "posterior_x0_given_xt",
    "gaussian_observation_posterior",
    "tweedie_mean",
    "flow_conditional_velocity",
    "flow_posterior_x1_given_xt",
    "fm_marginal_velocity",
    "gm_from_json",
    "gm_to_json",
    "load_registry",
    "PromptRegistry",
    "FLOW_T_CLAMP",
]

WEIGHT_TOL = 1e-12
SYMMETRY_TOL = 1e-12
FLOW_T_CLAMP = 1e-4


def _as_batch(x: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    """Promote a (d,) vector to a (1, d) batch; flag whether to squeeze."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ValueError(f"point has dimension {x.shape[0]}, expected {dim}")
        return x[None, :], True
    if x.ndim == 2:
        if x.shape[1] != dim:
            raise ValueError(f"points have dimension {x.shape[1]}, expected {dim}")
        return x, False
    raise ValueError(f"expected a (d,) or (n, d) array, got shape {x.shape}")


def _logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    out = np.log(np.sum(np.exp(a - amax), axis=axis)) + np.squeeze(amax, axis=axis)
    return out


@dataclass(frozen=True)
class GaussianMixture:
    """Finite Gaussian mixture with full covariances.

    Parameters
    ----------
    weights : (m,) array
        Component probabilities.  Must be non-negative and sum to 1
        within 1e-12.
    means : (m, d) array
        Component means.
    covs : (m, d, d) array
        Symmetric positive-definite component covariances (validated by
        a Cholesky factorization at construction).
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    chols: np.ndarray = field(init=False, repr=False, compare=False)
    log_weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        cov = np.asarray(self.covs, dtype=float)
        if cov.ndim == 2:
            cov = cov[None, :, :]
        m, d = mu.shape
        if w.shape != (m,) or cov.shape != (m, d, d):
            raise ValueError(
                f"inconsistent shapes: weights {w.shape}, means {mu.shape}, covs {cov.shape}"
            )
        if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError("weights must be non-negative and sum to 1 within 1e-12")
        if np.max(np.abs(cov - np.swapaxes(cov, -1, -2))) > SYMMETRY_TOL:
            raise ValueError("covariances must be symmetric within 1e-12")
        try:
            chols = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariances must be positive definite") from exc
        for arr in (w, mu, cov, chols):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", cov)
        object.__setattr__(self, "chols", chols)
        lw = np.log(np.maximum(w, 1e-300))
        lw.setflags(write=False)
        object.__setattr__(self, "log_weights", lw)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]


def _component_log_pdfs(gm: GaussianMixture, x: np.ndarray) -> np.ndarray:
    """Log N(x; mu_i, Sigma_i) for every point/component pair, shape (n, m)."""
    n = x.shape[0]
    m, d = gm.means.shape
    out = np.empty((n, m))
    const = -0.5 * d * np.log(2.0 * np.pi)
    for i in range(m):
        L = gm.chols[i]
        dx = (x - gm.means[i]).T  # (d, n)
        z = np.linalg.solve(L, dx)
        log_det = np.sum(np.log(np.diag(L)))
        out[:, i] = const - log_det - 0.5 * np.sum(z * z, axis=0)
    return out


def gm_log_density(gm: GaussianMixture, x: np.ndarray) -> np.ndarray | float:
    """Log-density ``log sum_i w_i N(x; mu_i, Sigma_i)`` via log-sum-exp.

    Parameters
    ----------
    gm : GaussianMixture
    x : (d,) or (n, d) array

    Returns
    -------
    float or (n,) array
    """
    xb, squeeze = _as_batch(x, gm.dim)
    lp = _logsumexp(gm.log_weights[None, :] + _component_log_pdfs(gm, xb), axis=1)
    return float(lp[0]) if squeeze else lp


def _score_parts(gm: GaussianMixture, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Responsibilities (n, m) and per-component gradients (n, m, d)."""
    n = x.shape[0]
    m, d = gm.means.shape
    logp = gm.log_weights[None, :] + _component_log_pdfs(gm, x)
    logp -= _logsumexp(logp, axis=1)[:, None]
    resp = np.exp(logp)
    grads = np.empty((n, m, d))
    for i in range(m):
        L = gm.chols[i]
        dx = (gm.means[i] - x).T  # (d, n)
        v = np.linalg.solve(L.T, np.linalg.solve(L, dx))
        grads[:, i, :] = v.T
    return resp, grads


def gm_score(gm: GaussianMixture, x: np.ndarray) -> np.ndarray:
    """Gradient of ``gm_log_density`` with respect to the state.

    Responsibilities are formed in log space so heavily imbalanced
    components cannot overflow.
    """
    xb, squeeze = _as_batch(x, gm.dim)
    resp, grads = _score_parts(gm, xb)
    s = np.sum(resp[:, :, None] * grads, axis=1)
    return s[0] if squeeze else s


def gm_hessian_log_density(gm: GaussianMixture, x: np.ndarray) -> np.ndarray:
    """Hessian of the mixture log-density, shape (d, d) or (n, d, d).

    Used for the analytic Jacobian of the posterior mean.
    """
    xb, squeeze = _as_batch(x, gm.dim)
    n = xb.shape[0]
    m, d = gm.means.shape
    resp, grads = _score_parts(gm, xb)
    precisions = np.empty((m, d, d))
    eye = np.eye(d)
    for i in range(m):
        L = gm.chols[i]
        precisions[i] = np.linalg.solve(L.T, np.linalg.solve(L, eye))
    s = np.sum(resp[:, :, None] * grads, axis=1)  # (n, d)
    h = np.einsum("nm,mde->nde", resp, -precisions)
    h += np.einsum("nm,nmd,nme->nde", resp, grads, grads)
    h -= np.einsum("nd,ne->nde", s, s)
    return h[0] if squeeze else h


def gm_sample(gm: GaussianMixture, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` exact samples, shape (n, d)."""
    comps = rng.choice(gm.n_components, size=n, p=gm.weights)
    eps = rng.standard_normal((n, gm.dim))
    out = np.empty((n, gm.dim))
    for i in range(gm.n_components):
        mask = comps == i
        if np.any(mask):
            out[mask] = gm.means[i] + eps[mask] @ gm.chols[i].T
    return out


def gm_mean_cov(gm: GaussianMixture) -> tuple[np.ndarray, np.ndarray]:
    """First two moments of the mixture."""
    mean = gm.weights @ gm.means
    d = gm.dim
    cov = np.zeros((d, d))
    for i in range(gm.n_components):
        dm = gm.means[i] - mean
        cov += gm.weights[i] * (gm.covs[i] + np.outer(dm, dm))
    return mean, cov


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-preserving schedule with linear rate beta(t).

    alpha(t) = exp(-t^2 (beta_max - beta_min) / (4 T) - t beta_min / 2)
    and sigma(t)^2 = 1 - alpha(t)^2, so alpha^2 + sigma^2 = 1 for all t.
    The associated SDE has drift ``f(x, t) = -beta(t) x / 2`` and
    diffusion ``g(t) = sqrt(beta(t))``, whose perturbation kernel is
    N(alpha_t x_0, sigma_t^2 I).
    """

    beta_min: float = 0.1
    beta_max: float = 20.0
    horizon: float = 1.0

    def __post_init__(self):
        if not (0 < self.beta_min < self.beta_max and self.horizon > 0):
            raise ValueError("need 0 < beta_min < beta_max and horizon > 0")

    def beta(self, t):
        return self.beta_min + (self.beta_max - self.beta_min) * np.asarray(t) / self.horizon

    def log_alpha(self, t):
        t = np.asarray(t, dtype=float)
        return -0.25 * t**2 * (self.beta_max - self.beta_min) / self.horizon - 0.5 * t * self.beta_min

    def alpha(self, t):
        return np.exp(self.log_alpha(t))

    def sigma2(self, t):
        # 1 - alpha^2 computed without cancellation near t = 0
        return -np.expm1(2.0 * self.log_alpha(t))

    def sigma(self, t):
        return np.sqrt(self.sigma2(t))

    def f(self, x, t):
        return -0.5 * self.beta(t) * np.asarray(x, dtype=float)

    def g(self, t):
        return np.sqrt(self.beta(t))

    def transition(self, s, t):
        """Kernel x_t | x_s = N(a x_s, v I) for 0 <= s <= t: returns (a, v)."""
        if not 0 <= s <= t <= self.horizon:
            raise ValueError(f"need 0 <= s <= t <= {self.horizon}, got s={s}, t={t}")
        dla = self.log_alpha(t) - self.log_alpha(s)
        return np.exp(dla), -np.expm1(2.0 * dla)

    def _validate_time(self, t, *, allow_zero: bool) -> float:
        t = float(t)
        lo_ok = t >= 0 if allow_zero else t > 0
        if not (lo_ok and t <= self.horizon):
            kind = "[0, T]" if allow_zero else "(0, T]"
            raise ValueError(f"time {t} outside {kind} with T={self.horizon}")
        return t


def diffuse_marginal(gm: GaussianMixture, sched: NoiseSchedule, t: float) -> GaussianMixture:
    """Mixture of x_t under the forward kernel: means alpha_t mu_i,
    covariances alpha_t^2 Sigma_i + sigma_t^2 I, weights unchanged."""
    t = sched._validate_time(t, allow_zero=True)
    a = float(sched.alpha(t))
    s2 = float(sched.sigma2(t))
    eye = np.eye(gm.dim)
    return GaussianMixture(
        weights=gm.weights.copy(),
        means=a * gm.means,
        covs=a * a * gm.covs + s2 * eye,
    )


class GaussianPosterior(NamedTuple):
    """Per-component conjugate update against a N(a x, v I) observation.

    For a batch of n observation points and an m-component prior:

    log_evidence : (n, m)  log w_i + log N(x; a mu_i, a^2 Sigma_i + v I)
    log_resp     : (n, m)  normalized posterior log-weights
    means        : (n, m, d) posterior component means
    covs         : (m, d, d) posterior component covariances
    gains        : (m, d, d) Kalman gains a Sigma_i S_i^{-1} = d mean / d x
    evid_grads   : (n, m, d) gradient of each log evidence w.r.t. x
    """

    log_evidence: np.ndarray
    log_resp: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    gains: np.ndarray
    evid_grads: np.ndarray

    def marginal_log_density(self) -> np.ndarray:
        return _logsumexp(self.log_evidence, axis=1)

    def marginal_score(self) -> np.ndarray:
        resp = np.exp(self.log_resp)
        return np.sum(resp[:, :, None] * self.evid_grads, axis=1)

    def mean(self) -> np.ndarray:
        resp = np.exp(self.log_resp)
        return np.sum(resp[:, :, None] * self.means, axis=1)


def gaussian_observation_posterior(
    gm: GaussianMixture, coef: float, noise_var: float, x: np.ndarray
) -> GaussianPosterior:
    """Exact Bayes update of a GM prior against the likelihood N(x; coef z, noise_var I).

    This one routine backs both the denoising posterior (coef = alpha_t,
    noise_var = sigma_t^2) and the interpolation-path posterior
    (coef = t, noise_var = (1 - t)^2).
    """
    if noise_var <= 0:
        raise ValueError("observation noise variance must be positive")
    xb, _ = _as_batch(x, gm.dim)
    n = xb.shape[0]
    m, d = gm.means.shape
    eye = np.eye(d)
    log_ev = np.empty((n, m))
    means = np.empty((n, m, d))
    covs = np.empty((m, d, d))
    gains = np.empty((m, d, d))
    egrads = np.empty((n, m, d))
    const = -0.5 * d * np.log(2.0 * np.pi)
    for i in range(m):
        S = coef * coef * gm.covs[i] + noise_var * eye
        Ls = np.linalg.cholesky(S)
        dx = (xb - coef * gm.means[i]).T  # (d, n)
        z = np.linalg.solve(Ls, dx)
        log_ev[:, i] = gm.log_weights[i] + const - np.sum(np.log(np.diag(Ls))) - 0.5 * np.sum(z * z, axis=0)
        Sinv_dx = np.linalg.solve(Ls.T, z)  # S^{-1} (x - coef mu)
        egrads[:, i, :] = -Sinv_dx.T
        K = coef * gm.covs[i] @ np.linalg.solve(Ls.T, np.linalg.solve(Ls, eye))
        gains[i] = K
        C = gm.covs[i] - coef * K @ gm.covs[i]
        covs[i] = 0.5 * (C + C.T)
        means[:, i, :] = gm.means[i] + (K @ dx).T
    log_resp = log_ev - _logsumexp(log_ev, axis=1)[:, None]
    return GaussianPosterior(log_ev, log_resp, means, covs, gains, egrads)


def posterior_x0_given_xt(
    gm: GaussianMixture, sched: NoiseSchedule, t: float, x_t: np.ndarray
) -> GaussianMixture:
    """Exact denoising posterior p(x_0 | x_t) as a Gaussian mixture.

    Parameters
    ----------
    gm : GaussianMixture
        Data distribution (the t=0 mixture).
    sched : NoiseSchedule
    t : float
        Must lie in (0, T]; at t=0 the likelihood is degenerate.
    x_t : (d,) array
        Single conditioning point.

    Returns
    -------
    GaussianMixture
        Posterior with re-normalized evidence weights.
    """
    t = sched._validate_time(t, allow_zero=False)
    x_t = np.asarray(x_t, dtype=float)
    if x_t.ndim != 1:
        raise ValueError("posterior_x0_given_xt expects a single (d,) point")
    parts = gaussian_observation_posterior(gm, float(sched.alpha(t)), float(sched.sigma2(t)), x_t)
    return GaussianMixture(
        weights=np.exp(parts.log_resp[0]),
        means=parts.means[0],
        covs=parts.covs,
    )


def tweedie_mean(gm: GaussianMixture, sched: NoiseSchedule, t: float, x_t: np.ndarray) -> np.ndarray:
    """Posterior mean E[x_0 | x_t] = (x_t + sigma_t^2 score_t(x_t)) / alpha_t."""
    t = sched._validate_time(t, allow_zero=False)
    xb, squeeze = _as_batch(x_t, gm.dim)
    marg = diffuse_marginal(gm, sched, t)
    m = (xb + float(sched.sigma2(t)) * gm_score(marg, xb)) / float(sched.alpha(t))
    return m[0] if squeeze else m


# ----------------------------------------------------------------------
# Linear interpolation path (noise at t=0, data at t=1)
# ----------------------------------------------------------------------


def flow_conditional_velocity(x1: np.ndarray, x_t: np.ndarray, t: float) -> np.ndarray:
    """Per-pair transport field (x1 - x_t) / (1 - t) for t < 1."""
    if t >= 1.0 - FLOW_T_CLAMP:
        raise ValueError(f"conditional velocity is singular for t >= {1.0 - FLOW_T_CLAMP}")
    return (np.asarray(x1, dtype=float) - np.asarray(x_t, dtype=float)) / (1.0 - t)


def _validate_flow_time(t: float) -> float:
    t = float(t)
    if not 0.0 <= t < 1.0 - FLOW_T_CLAMP:
        raise ValueError(f"flow time {t} outside [0, {1.0 - FLOW_T_CLAMP})")
    return t


def flow_posterior_x1_given_xt(gm: GaussianMixture, t: float, x_t: np.ndarray) -> GaussianMixture:
    """Posterior over the data endpoint given x_t = t x_1 + (1 - t) x_0."""
    t = _validate_flow_time(t)
    x_t = np.asarray(x_t, dtype=float)
    if x_t.ndim != 1:
        raise ValueError("flow_posterior_x1_given_xt expects a single (d,) point")
    parts = gaussian_observation_posterior(gm, t, (1.0 - t) ** 2, x_t)
    return GaussianMixture(
        weights=np.exp(parts.log_resp[0]),
        means=parts.means[0],
        covs=parts.covs,
    )


def fm_marginal_velocity(gm: GaussianMixture, t: float, x_t: np.ndarray) -> np.ndarray:
    """Marginal velocity: the conditional velocity averaged over p(x_1 | x_t).

    Equals (E[x_1 | x_t] - x_t) / (1 - t), with the expectation taken
    under the exact conjugate posterior of the data mixture.
    """
    t = _validate_flow_time(t)
    xb, squeeze = _as_batch(x_t, gm.dim)
    parts = gaussian_observation_posterior(gm, t, (1.0 - t) ** 2, xb)
    v = (parts.mean() - xb) / (1.0 - t)
    return v[0] if squeeze else v


# ----------------------------------------------------------------------
# Serialization
# ----------------------------------------------------------------------


def gm_from_json(doc: dict) -> GaussianMixture:
    """Build a mixture from ``{"weights": [...], "means": [[...]], "covs": [[[...]]]}``."""
    missing = {"weights", "means", "covs"} - set(doc)
    if missing:
        raise ValueError(f"mixture document missing fields: {sorted(missing)}")
    return GaussianMixture(
        weights=np.asarray(doc["weights"], dtype=float),
        means=np.asarray(doc["means"], dtype=float),
        covs=np.asarray(doc["covs"], dtype=float),
    )


def gm_to_json(gm: GaussianMixture) -> dict:
    return {
        "weights": gm.weights.tolist(),
        "means": gm.means.tolist(),
        "covs": gm.covs.tolist(),
    }


@dataclass(frozen=True)
class PromptRegistry:
    """Prompt id -> mixture lookup plus a content hash for artifact headers."""

    mixtures: tuple[GaussianMixture, ...]
    digest: str

    def __len__(self) -> int:
        return len(self.mixtures)

    def mixture(self, prompt: int) -> GaussianMixture:
        if not 0 <= int(prompt) < len(self.mixtures):
            raise ValueError(f"prompt id {prompt} outside registry of size {len(self.mixtures)}")
        return self.mixtures[int(prompt)]

    @property
    def dim(self) -> int:
        return self.mixtures[0].dim


def registry_from_docs(docs: list[dict]) -> PromptRegistry:
    mixtures = tuple(gm_from_json(doc) for doc in docs)
    if not mixtures:
        raise ValueError("registry must contain at least one mixture")
    if len({gm.dim for gm in mixtures}) != 1:
        raise ValueError("all registry mixtures must share one dimension")
    canonical = json.dumps([gm_to_json(gm) for gm in mixtures], sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(canonical.encode()).hexdigest()
    return PromptRegistry(mixtures=mixtures, digest=digest)


def load_registry(path) -> PromptRegistry:
    """Load a registry JSON file: either a list of mixture documents or
    ``{"mixtures": [...]}``; a bare single mixture document also works."""
    with open(path) as fh:
        doc = json.load(fh)
    if isinstance(doc, dict) and "mixtures" in doc:
        docs = doc["mixtures"]
    elif isinstance(doc, dict):
        docs = [doc]
    else:
        docs = doc
    return registry_from_docs(docs)
