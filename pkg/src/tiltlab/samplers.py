"""Generation procedures: reverse SDE, probability-flow ODE, flow Euler,
and the single-step guided denoiser.

All samplers are deterministic given their config seed.  Stochastic
guidance sources receive a per-step seed derived with splitmix so that
parallel replicas stay independent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .flow_guidance import FlowGuidanceSource, guided_velocity
from .guidance import DegenerateWeightsError, GuidanceSource, guided_score
from .mixtures import GaussianMixture, NoiseSchedule
from .rewards import Reward
from .utils import derive_seed

__all__ = [
    "SamplerConfig",
    "SamplerStats",
    "sample_reverse_sde",
    "sample_prob_flow_ode",
    "sample_flow",
    "sample_one_step",
    "run_sampler",
    "write_samples_csv",
    "read_samples_csv",
]

ALPHA_FLOOR = 1e-3


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "reverse_sde"  # reverse_sde | prob_flow_ode | flow_euler | one_step
    steps: int = 256
    batch: int = 4096
    seed: int = 0
    t_start: float | None = None  # defaults to the schedule horizon
    t_end: float = 1e-4  # SDE/ODE integration stop
    eps: float = 1e-3  # flow clamp before t = 1

    VALID = ("reverse_sde", "prob_flow_ode", "flow_euler", "one_step")

    def __post_init__(self):
        if self.kind not in self.VALID:
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.kind == "one_step" and self.steps != 1:
            raise ValueError("one_step runs exactly one step")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


@dataclass
class SamplerStats:
    kind: str = ""
    steps: int = 0
    batch: int = 0
    ess_min: float | None = None
    ess_mean: float | None = None
    low_ess_steps: int = 0
    alpha_floor_hits: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "steps": self.steps,
            "batch": self.batch,
            "ess_min": self.ess_min,
            "ess_mean": self.ess_mean,
            "low_ess_steps": self.low_ess_steps,
            "alpha_floor_hits": self.alpha_floor_hits,
            "warnings": self.warnings,
        }


def _collect_ess(stats: SamplerStats, scratch: dict) -> None:
    ess = scratch.get("ess")
    if ess:
        stats.ess_min = float(np.min(ess))
        stats.ess_mean = float(np.mean(ess))
    stats.low_ess_steps = scratch.get("low_ess_steps", 0)
    if stats.low_ess_steps:
        stats.warnings.append(
            f"effective sample size below 1% of the proposal count on {stats.low_ess_steps} step(s)"
        )


def _check_finite(x: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x)):
        raise RuntimeError(f"non-finite state at step {step}")


def sample_reverse_sde(
    gm: GaussianMixture,
    sched: NoiseSchedule,
    source: GuidanceSource,
    r: Reward | None,
    y: int,
    cfg: SamplerConfig,
) -> tuple[np.ndarray, SamplerStats]:
    """Euler-Maruyama on the reverse SDE from pure noise down to t_end."""
    if cfg.kind != "reverse_sde":
        raise ValueError("config kind must be reverse_sde")
    rng = np.random.default_rng(cfg.seed)
    d = gm.dim
    x = rng.standard_normal((cfg.batch, d))
    t_start = sched.horizon if cfg.t_start is None else cfg.t_start
    ts = np.linspace(t_start, cfg.t_end, cfg.steps + 1)
    stats = SamplerStats(kind=cfg.kind, steps=cfg.steps, batch=cfg.batch)
    scratch: dict = {}
    for k in range(cfg.steps):
        t = float(ts[k])
        dt = float(ts[k] - ts[k + 1])
        score = guided_score(
            source, gm, sched, r, y, x, t, seed=derive_seed(cfg.seed, k), stats=scratch
        )
        drift = sched.f(x, t) - sched.g(t) ** 2 * score
        noise = rng.standard_normal((cfg.batch, d))
        x = x - dt * drift + float(sched.g(t)) * np.sqrt(dt) * noise
        _check_finite(x, k)
    _collect_ess(stats, scratch)
    return x, stats


def sample_prob_flow_ode(
    gm: GaussianMixture,
    sched: NoiseSchedule,
    source: GuidanceSource,
    r: Reward | None,
    y: int,
    cfg: SamplerConfig,
) -> tuple[np.ndarray, SamplerStats]:
    """Deterministic counterpart: dx = [f - g^2 score / 2] dt."""
    if cfg.kind != "prob_flow_ode":
        raise ValueError("config kind must be prob_flow_ode")
    rng = np.random.default_rng(cfg.seed)
    d = gm.dim
    x = rng.standard_normal((cfg.batch, d))
    t_start = sched.horizon if cfg.t_start is None else cfg.t_start
    ts = np.linspace(t_start, cfg.t_end, cfg.steps + 1)
    stats = SamplerStats(kind=cfg.kind, steps=cfg.steps, batch=cfg.batch)
    scratch: dict = {}
    for k in range(cfg.steps):
        t = float(ts[k])
        dt = float(ts[k] - ts[k + 1])
        score = guided_score(
            source, gm, sched, r, y, x, t, seed=derive_seed(cfg.seed, k), stats=scratch
        )
        drift = sched.f(x, t) - 0.5 * sched.g(t) ** 2 * score
        x = x - dt * drift
        _check_finite(x, k)
    _collect_ess(stats, scratch)
    return x, stats


def sample_flow(
    gm: GaussianMixture,
    r: Reward | None,
    y: int,
    source: FlowGuidanceSource,
    cfg: SamplerConfig,
) -> tuple[np.ndarray, SamplerStats]:
    """Euler integration of the guided velocity from noise at t=0 to
    t = 1 - eps, then one conditional-mean step across the clamp."""
    if cfg.kind != "flow_euler":
        raise ValueError("config kind must be flow_euler")
    rng = np.random.default_rng(cfg.seed)
    d = gm.dim
    x = rng.standard_normal((cfg.batch, d))
    ts = np.linspace(0.0, 1.0 - cfg.eps, cfg.steps + 1)
    stats = SamplerStats(kind=cfg.kind, steps=cfg.steps, batch=cfg.batch)
    scratch: dict = {}
    for k in range(cfg.steps):
        t = float(ts[k])
        dt = float(ts[k + 1] - ts[k])
        try:
            v = guided_velocity(
                source, gm, r, y, x, t, seed=derive_seed(cfg.seed, k), stats=scratch
            )
        except DegenerateWeightsError as exc:
            raise DegenerateWeightsError(f"step {k} (t={t:.4f}): {exc}") from exc
        x = x + dt * v
        _check_finite(x, k)
    # final conditional-mean step across [1 - eps, 1]
    try:
        v = guided_velocity(
            source, gm, r, y, x, 1.0 - cfg.eps, seed=derive_seed(cfg.seed, cfg.steps), stats=scratch
        )
    except DegenerateWeightsError as exc:
        raise DegenerateWeightsError(f"final step (t={1.0 - cfg.eps:.4f}): {exc}") from exc
    x = x + cfg.eps * v
    _check_finite(x, cfg.steps)
    _collect_ess(stats, scratch)
    return x, stats


def sample_one_step(
    gm: GaussianMixture,
    sched: NoiseSchedule,
    source: GuidanceSource,
    r: Reward | None,
    y: int,
    cfg: SamplerConfig,
) -> tuple[np.ndarray, SamplerStats]:
    """Guided denoiser: x_hat = (x_T + sigma_T^2 score(x_T, T)) / alpha_T."""
    if cfg.kind != "one_step":
        raise ValueError("config kind must be one_step")
    rng = np.random.default_rng(cfg.seed)
    d = gm.dim
    T = sched.horizon
    x = rng.standard_normal((cfg.batch, d))
    stats = SamplerStats(kind=cfg.kind, steps=1, batch=cfg.batch)
    scratch: dict = {}
    score = guided_score(source, gm, sched, r, y, x, T, seed=cfg.seed, stats=scratch)
    a = float(sched.alpha(T))
    if a < ALPHA_FLOOR:
        stats.alpha_floor_hits += 1
        stats.warnings.append(f"alpha_T={a:.3e} floored at {ALPHA_FLOOR}")
        a = ALPHA_FLOOR
    x = (x + float(sched.sigma2(T)) * score) / a
    _check_finite(x, 0)
    _collect_ess(stats, scratch)
    return x, stats


def run_sampler(
    gm: GaussianMixture,
    sched: NoiseSchedule | None,
    r: Reward | None,
    y: int,
    guidance,
    cfg: SamplerConfig,
) -> tuple[np.ndarray, SamplerStats]:
    """Dispatch on cfg.kind; flow samplers take a FlowGuidanceSource."""
    if cfg.kind == "reverse_sde":
        return sample_reverse_sde(gm, sched, guidance, r, y, cfg)
    if cfg.kind == "prob_flow_ode":
        return sample_prob_flow_ode(gm, sched, guidance, r, y, cfg)
    if cfg.kind == "one_step":
        return sample_one_step(gm, sched, guidance, r, y, cfg)
    return sample_flow(gm, r, y, guidance, cfg)


# ----------------------------------------------------------------------
# Artifacts
# ----------------------------------------------------------------------


def write_samples_csv(path, x: np.ndarray, config_hash: str, seed: int) -> None:
    """One row per sample, columns x_1..x_d, prefixed by a comment line
    carrying the config hash and seed."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = x.shape[1]
    with open(path, "w") as fh:
        fh.write(f"# config_hash={config_hash} seed={seed}\n")
        fh.write(",".join(f"x_{k + 1}" for k in range(d)) + "\n")
        for row in x:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_samples_csv(path) -> tuple[np.ndarray, dict]:
    meta: dict = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    if "=" in tok:
                        k, v = tok.split("=", 1)
                        meta[k] = v
                continue
            if line.startswith("x_1"):
                continue
            rows.append([float(v) for v in line.split(",")])
    return np.asarray(rows), meta


def write_stats_json(path, stats: SamplerStats, extra: dict | None = None) -> None:
    doc = stats.to_json()
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
