"""Reward functions, exact exponential tilting, and preference data.

A reward ``r(x, y)`` with inverse temperature ``beta`` defines the
tilted target ``q(x|y) = p(x|y) exp(r(x,y)/beta) / Z(y)``.  Linear and
quadratic rewards tilt a Gaussian mixture in closed form; the bump
reward falls back to quadrature for the partition function and to
rejection sampling for draws.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from .mixtures import GaussianMixture, gm_log_density, gm_sample
from .quad import grid_for_mixture, log_integrate_grid

__all__ = [
    "Reward",
    "LinearReward",
    "QuadraticReward",
    "RbfBumpReward",
    "LearnedLinearReward",
    "TiltedDistribution",
    "PreferencePair",
    "eval_reward",
    "tilt_gm",
    "synth_preferences",
    "fit_reward_bt",
    "BtFitResult",
    "sample_tilted",
    "reward_to_json",
    "reward_from_json",
    "save_preferences_jsonl",
    "load_preferences_jsonl",
]


@dataclass(frozen=True, kw_only=True)
class Reward:
    """Base reward: subclasses provide value(x, y) and grad(x, y)."""

    beta: float = 1.0
    kind: ClassVar[str] = "abstract"

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    def value(self, x: np.ndarray, y: int | None = None):
        raise NotImplementedError

    def grad(self, x: np.ndarray, y: int | None = None) -> np.ndarray:
        raise NotImplementedError

    def _check_dim(self, x: np.ndarray, d: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != d:
            raise ValueError(f"point dimension {x.shape[-1]} does not match reward dimension {d}")
        return x


@dataclass(frozen=True)
class LinearReward(Reward):
    """r(x) = a . x"""

    a: np.ndarray
    kind: ClassVar[str] = "linear"

    def __post_init__(self):
        super().__post_init__()
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        a.setflags(write=False)
        object.__setattr__(self, "a", a)

    def value(self, x, y=None):
        x = self._check_dim(x, self.a.shape[0])
        return x @ self.a

    def grad(self, x, y=None):
        x = self._check_dim(x, self.a.shape[0])
        return np.broadcast_to(self.a, x.shape).copy()


@dataclass(frozen=True)
class LearnedLinearReward(LinearReward):
    """Linear reward recovered from preference pairs."""

    kind: ClassVar[str] = "learned_linear"


@dataclass(frozen=True)
class QuadraticReward(Reward):
    """r(x) = -x . A x / 2 + b . x with A symmetric."""

    A: np.ndarray
    b: np.ndarray
    kind: ClassVar[str] = "quadratic"

    def __post_init__(self):
        super().__post_init__()
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if A.shape != (b.shape[0], b.shape[0]):
            raise ValueError("A must be (d, d) and b (d,)")
        if np.max(np.abs(A - A.T)) > 1e-12:
            raise ValueError("A must be symmetric")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    def value(self, x, y=None):
        x = self._check_dim(x, self.b.shape[0])
        return -0.5 * np.sum((x @ self.A) * x, axis=-1) + x @ self.b

    def grad(self, x, y=None):
        x = self._check_dim(x, self.b.shape[0])
        return -(x @ self.A) + self.b


@dataclass(frozen=True)
class RbfBumpReward(Reward):
    """r(x) = height * exp(-|x - center|^2 / (2 width^2)); bounded, non-conjugate."""

    center: np.ndarray
    width: float
    height: float
    kind: ClassVar[str] = "rbf_bump"

    def __post_init__(self):
        super().__post_init__()
        if not self.width > 0:
            raise ValueError("width must be positive")
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        c.setflags(write=False)
        object.__setattr__(self, "center", c)

    def value(self, x, y=None):
        x = self._check_dim(x, self.center.shape[0])
        sq = np.sum((x - self.center) ** 2, axis=-1)
        return self.height * np.exp(-sq / (2.0 * self.width**2))

    def grad(self, x, y=None):
        x = self._check_dim(x, self.center.shape[0])
        val = self.value(x)
        return -np.asarray(val)[..., None] * (x - self.center) / self.width**2

    @property
    def sup_value(self) -> float:
        """Supremum of r over all inputs (0 far away, height at the center)."""
        return max(self.height, 0.0)


def eval_reward(r: Reward, x: np.ndarray, y: int | None = None):
    """Evaluate r(x, y); x may be (d,) or (n, d)."""
    v = r.value(x, y)
    return float(v) if np.ndim(v) == 0 else v


def is_conjugate(r: Reward) -> bool:
    return isinstance(r, (LinearReward, QuadraticReward))


@dataclass(frozen=True)
class TiltedDistribution:
    """Base mixture tilted by exp(r/beta) and renormalized.

    ``closed_form`` is populated for linear and quadratic rewards; for
    other rewards the density is only available through the base
    density, the reward and the quadrature partition estimate.
    """

    base: GaussianMixture
    reward: Reward
    closed_form: GaussianMixture | None
    log_partition: float

    def log_density(self, x: np.ndarray):
        if self.closed_form is not None:
            return gm_log_density(self.closed_form, x)
        return gm_log_density(self.base, x) + np.asarray(self.reward.value(x)) / self.reward.beta - self.log_partition

    def mean_reward(self) -> float | None:
        """Closed-form E_q[r] when the tilt is conjugate, else None."""
        if self.closed_form is None:
            return None
        return _gm_expected_reward(self.closed_form, self.reward)


def _gm_expected_reward(gm: GaussianMixture, r: Reward) -> float:
    if isinstance(r, LinearReward):
        return float((gm.weights @ gm.means) @ r.a)
    if isinstance(r, QuadraticReward):
        total = 0.0
        for i in range(gm.n_components):
            m = gm.means[i]
            total += gm.weights[i] * (
                -0.5 * (m @ r.A @ m + np.trace(r.A @ gm.covs[i])) + r.b @ m
            )
        return float(total)
    raise ValueError(f"no closed-form moments for reward kind {r.kind!r}")


def _linear_tilt_component(mu, cov, a, beta):
    shift = cov @ a / beta
    log_evidence = float(a @ mu / beta + a @ cov @ a / (2.0 * beta**2))
    return mu + shift, cov, log_evidence


def _quadratic_tilt_component(mu, cov, A, b, beta):
    d = mu.shape[0]
    L = np.linalg.cholesky(cov)
    prec = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(d)))
    lam = prec + A / beta
    try:
        Ll = np.linalg.cholesky(lam)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            "quadratic tilt requires Sigma^{-1} + A/beta positive definite"
        ) from exc
    eta = prec @ mu + b / beta
    new_cov = np.linalg.solve(Ll.T, np.linalg.solve(Ll, np.eye(d)))
    new_cov = 0.5 * (new_cov + new_cov.T)
    new_mu = new_cov @ eta
    # log of integral N(x; mu, cov) exp(-x.Ax/(2 beta) + b.x/beta) dx
    log_evidence = float(
        -np.sum(np.log(np.diag(L)))
        - np.sum(np.log(np.diag(Ll)))
        + 0.5 * eta @ new_cov @ eta
        - 0.5 * mu @ prec @ mu
    )
    return new_mu, new_cov, log_evidence


def tilt_gm(base: GaussianMixture, r: Reward) -> TiltedDistribution:
    """Exponentially tilt a mixture by exp(r/beta).

    Linear rewards shift each component by Sigma_i a / beta; quadratic
    rewards update each precision to Sigma_i^{-1} + A/beta.  Weights are
    reweighted by the per-component evidence in log space, and the
    log partition function is their log-sum-exp.  Non-conjugate rewards
    get a quadrature partition estimate (d <= 2) and no closed form.
    """
    beta = r.beta
    if isinstance(r, LinearReward) or isinstance(r, QuadraticReward):
        m = base.n_components
        means = np.empty_like(base.means)
        covs = np.empty_like(base.covs)
        log_ev = np.empty(m)
        for i in range(m):
            if isinstance(r, LinearReward):
                means[i], covs[i], log_ev[i] = _linear_tilt_component(
                    base.means[i], base.covs[i], r.a, beta
                )
            else:
                means[i], covs[i], log_ev[i] = _quadratic_tilt_component(
                    base.means[i], base.covs[i], r.A, r.b, beta
                )
        logits = base.log_weights + log_ev
        log_z = float(np.logaddexp.reduce(logits))
        weights = np.exp(logits - log_z)
        weights = weights / weights.sum()
        closed = GaussianMixture(weights=weights, means=means, covs=covs)
        return TiltedDistribution(base=base, reward=r, closed_form=closed, log_partition=log_z)
    if base.dim > 2:
        raise ValueError(
            f"reward kind {r.kind!r} has no closed-form tilt and quadrature is limited to d <= 2"
        )
    pts, logw = grid_for_mixture(base)
    log_f = gm_log_density(base, pts) + np.asarray(r.value(pts)) / beta
    log_z = log_integrate_grid(log_f, logw)
    if not np.isfinite(log_z):
        raise ValueError("non-finite log partition function")
    return TiltedDistribution(base=base, reward=r, closed_form=None, log_partition=log_z)


def sample_tilted(
    tilted: TiltedDistribution,
    n: int,
    rng: np.random.Generator,
    min_acceptance: float = 1e-4,
) -> np.ndarray:
    """Draw exact samples from the tilted distribution.

    Conjugate tilts sample the closed-form mixture.  Bounded rewards use
    rejection from the base with envelope exp(sup r / beta); the run
    aborts if the acceptance rate falls below ``min_acceptance``.
    """
    if tilted.closed_form is not None:
        return gm_sample(tilted.closed_form, n, rng)
    r = tilted.reward
    if not isinstance(r, RbfBumpReward):
        raise ValueError(f"no sampler for unbounded non-conjugate reward kind {r.kind!r}")
    log_m = r.sup_value / r.beta
    out = np.empty((n, tilted.base.dim))
    filled = 0
    proposed = 0
    while filled < n:
        block = max(2 * (n - filled), 1024)
        x = gm_sample(tilted.base, block, rng)
        log_acc = np.asarray(r.value(x)) / r.beta - log_m
        keep = np.log(rng.uniform(size=block)) < log_acc
        proposed += block
        take = x[keep][: n - filled]
        out[filled : filled + take.shape[0]] = take
        filled += take.shape[0]
        if proposed >= 4096 and filled / proposed < min_acceptance:
            raise RuntimeError(
                f"rejection sampler acceptance rate {filled / proposed:.2e} below {min_acceptance:.0e}"
            )
    return out


# ----------------------------------------------------------------------
# Preference data and Bradley-Terry fitting
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class PreferencePair:
    prompt: int
    x_w: np.ndarray
    x_l: np.ndarray

    def __post_init__(self):
        x_w = np.atleast_1d(np.asarray(self.x_w, dtype=float))
        x_l = np.atleast_1d(np.asarray(self.x_l, dtype=float))
        if x_w.shape != x_l.shape:
            raise ValueError("winner and loser must share one dimension")
        object.__setattr__(self, "x_w", x_w)
        object.__setattr__(self, "x_l", x_l)


def synth_preferences(
    gm: GaussianMixture, r: Reward, y: int, n: int, seed: int
) -> list[PreferencePair]:
    """Generate n preference pairs from the logistic choice model.

    Both candidates are i.i.d. draws from ``gm``; the first candidate
    wins with probability sigmoid(r(x_a) - r(x_b)).  Deterministic for
    a given seed.
    """
    if n < 1:
        raise ValueError("need n >= 1 pairs")
    rng = np.random.default_rng(seed)
    xa = gm_sample(gm, n, rng)
    xb = gm_sample(gm, n, rng)
    margin = np.asarray(r.value(xa, y)) - np.asarray(r.value(xb, y))
    # P(a wins) = sigmoid(margin); compare a uniform in a stable form
    u = rng.uniform(size=n)
    a_wins = np.log(u) - np.log1p(-u) < margin
    pairs = []
    for i in range(n):
        if a_wins[i]:
            pairs.append(PreferencePair(prompt=y, x_w=xa[i], x_l=xb[i]))
        else:
            pairs.append(PreferencePair(prompt=y, x_w=xb[i], x_l=xa[i]))
    return pairs


@dataclass(frozen=True)
class BtFitResult:
    reward: LearnedLinearReward
    final_loss: float
    loss_history: np.ndarray


def fit_reward_bt(
    pairs: list[PreferencePair],
    family_dim: int,
    step: float = 0.1,
    iters: int = 5000,
    l2_penalty: float = 1e-6,
    beta: float = 1.0,
) -> BtFitResult:
    """Fit a linear reward to preference pairs by maximum likelihood.

    Minimizes ``-mean log sigmoid(a . (x_w - x_l)) + l2 |a|^2`` by
    full-batch gradient descent from a = 0 (where the loss is log 2).
    """
    if not pairs:
        raise ValueError("need at least one preference pair")
    diff = np.stack([p.x_w - p.x_l for p in pairs])
    if diff.shape[1] != family_dim:
        raise ValueError(f"pairs have dimension {diff.shape[1]}, expected {family_dim}")
    a = np.zeros(family_dim)
    history = np.empty(iters + 1)
    for it in range(iters + 1):
        margin = diff @ a
        # -log sigmoid(m) = log(1 + exp(-m)), stable for both signs
        loss = float(np.mean(np.logaddexp(0.0, -margin)) + l2_penalty * a @ a)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite Bradley-Terry loss at iteration {it}")
        history[it] = loss
        if it == iters:
            break
        sig = 1.0 / (1.0 + np.exp(-margin))
        grad = -np.mean((1.0 - sig)[:, None] * diff, axis=0) + 2.0 * l2_penalty * a
        a -= step * grad
    return BtFitResult(
        reward=LearnedLinearReward(a=a, beta=beta),
        final_loss=history[-1],
        loss_history=history,
    )


# ----------------------------------------------------------------------
# Serialization
# ----------------------------------------------------------------------


def reward_to_json(r: Reward) -> dict:
    doc: dict = {"kind": r.kind, "beta": r.beta}
    if isinstance(r, LinearReward):
        doc["a"] = r.a.tolist()
    elif isinstance(r, QuadraticReward):
        doc["A"] = r.A.tolist()
        doc["b"] = r.b.tolist()
    elif isinstance(r, RbfBumpReward):
        doc.update(center=r.center.tolist(), width=r.width, height=r.height)
    else:
        raise ValueError(f"cannot serialize reward kind {r.kind!r}")
    return doc


def reward_from_json(doc: dict) -> Reward:
    kind = doc.get("kind")
    beta = float(doc.get("beta", 1.0))
    if kind == "linear":
        return LinearReward(a=np.asarray(doc["a"], dtype=float), beta=beta)
    if kind == "learned_linear":
        return LearnedLinearReward(a=np.asarray(doc["a"], dtype=float), beta=beta)
    if kind == "quadratic":
        return QuadraticReward(
            A=np.asarray(doc["A"], dtype=float), b=np.asarray(doc["b"], dtype=float), beta=beta
        )
    if kind == "rbf_bump":
        return RbfBumpReward(
            center=np.asarray(doc["center"], dtype=float),
            width=float(doc["width"]),
            height=float(doc["height"]),
            beta=beta,
        )
    raise ValueError(f"unknown reward kind {kind!r}")


def save_preferences_jsonl(pairs: list[PreferencePair], path) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(
                json.dumps({"prompt": p.prompt, "x_w": p.x_w.tolist(), "x_l": p.x_l.tolist()})
                + "\n"
            )


def load_preferences_jsonl(path) -> list[PreferencePair]:
    pairs = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                doc = json.loads(line)
                pairs.append(PreferencePair(prompt=doc["prompt"], x_w=doc["x_w"], x_l=doc["x_l"]))
    return pairs
