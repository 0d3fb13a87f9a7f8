"""tiltlab: sampling from reward-tilted Gaussian-mixture distributions.

A desk-scale numerical laboratory.  An analytic Gaussian mixture stands
in for the pre-trained generative model; guidance terms added to its
scores (diffusion) or velocities (flow matching) steer sampling toward
the exponentially tilted target q(x|y) proportional to
p(x|y) exp(r(x,y)/beta), and every estimator is cross-checked against
closed-form or quadrature oracles.
"""

from .mixtures import (
    GaussianMixture,
    NoiseSchedule,
    PromptRegistry,
    diffuse_marginal,
    fm_marginal_velocity,
    gm_log_density,
    gm_sample,
    gm_score,
    load_registry,
    posterior_x0_given_xt,
    tweedie_mean,
)
from .rewards import (
    LearnedLinearReward,
    LinearReward,
    PreferencePair,
    QuadraticReward,
    RbfBumpReward,
    Reward,
    TiltedDistribution,
    eval_reward,
    fit_reward_bt,
    synth_preferences,
    tilt_gm,
)

__version__ = "0.1.0"
