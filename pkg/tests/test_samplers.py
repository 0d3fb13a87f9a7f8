"""Sampler correctness: moment matching, KS tests, determinism, step sweeps."""

import math

import numpy as np
import pytest

from tiltlab.flow_guidance import FlowGuidanceSource
from tiltlab.guidance import DegenerateWeightsError, GuidanceSource
from tiltlab.mixtures import GaussianMixture, gm_mean_cov, gm_sample
from tiltlab.rewards import LinearReward, tilt_gm
from tiltlab.samplers import (
    SamplerConfig,
    read_samples_csv,
    sample_flow,
    sample_one_step,
    sample_prob_flow_ode,
    sample_reverse_sde,
    write_samples_csv,
)

BIMODAL = GaussianMixture(weights=[0.5, 0.5], means=[[-3.0], [3.0]], covs=[[[0.25]], [[0.25]]])


def gm_cdf_1d(gm, x):
    total = np.zeros_like(x, dtype=float)
    for w, mu, cov in zip(gm.weights, gm.means, gm.covs):
        sd = math.sqrt(cov[0, 0])
        z = (x - mu[0]) / (sd * math.sqrt(2.0))
        total += w * 0.5 * (1.0 + np.vectorize(math.erf)(z))
    return total


def ks_statistic(samples, gm):
    xs = np.sort(samples[:, 0])
    n = xs.size
    cdf = gm_cdf_1d(gm, xs)
    emp_hi = np.arange(1, n + 1) / n
    emp_lo = np.arange(0, n) / n
    return max(np.max(np.abs(emp_hi - cdf)), np.max(np.abs(emp_lo - cdf)))


class TestReverseSde:
    def test_unguided_matches_data_moments(self, std_normal_1d, sched):
        cfg = SamplerConfig(kind="reverse_sde", steps=512, batch=10_000, seed=0)
        x, _ = sample_reverse_sde(std_normal_1d, sched, GuidanceSource(method="none"), None, 0, cfg)
        se_mean = x.std(ddof=1) / np.sqrt(x.shape[0])
        assert abs(x.mean()) < 3 * se_mean + 2e-3
        sq = x[:, 0] ** 2
        se_var = sq.std(ddof=1) / np.sqrt(sq.size)
        assert abs(sq.mean() - 1.0) < 3 * se_var + 5e-3

    def test_exact_guided_matches_tilted_moments(self, std_normal_1d, sched):
        r = LinearReward(a=[1.0], beta=1.0)
        cfg = SamplerConfig(kind="reverse_sde", steps=512, batch=10_000, seed=1)
        x, _ = sample_reverse_sde(std_normal_1d, sched, GuidanceSource(method="exact"), r, 0, cfg)
        tilted = tilt_gm(std_normal_1d, r).closed_form
        mean, cov = gm_mean_cov(tilted)
        se = x.std(ddof=1) / np.sqrt(x.shape[0])
        assert abs(x.mean() - mean[0]) < 3 * se + 5e-3
        sq = (x[:, 0] - x.mean()) ** 2
        se_var = sq.std(ddof=1) / np.sqrt(sq.size)
        assert abs(sq.mean() - cov[0, 0]) < 3 * se_var + 1e-2

    def test_deterministic(self, std_normal_1d, sched):
        cfg = SamplerConfig(kind="reverse_sde", steps=64, batch=256, seed=9)
        a, _ = sample_reverse_sde(std_normal_1d, sched, GuidanceSource(method="none"), None, 0, cfg)
        b, _ = sample_reverse_sde(std_normal_1d, sched, GuidanceSource(method="none"), None, 0, cfg)
        np.testing.assert_array_equal(a, b)

    def test_mode_coverage_bimodal_tilt(self, sched):
        r = LinearReward(a=[1.0], beta=1.0)
        tilted = tilt_gm(BIMODAL, r).closed_form
        cfg = SamplerConfig(kind="reverse_sde", steps=256, batch=10_000, seed=2)
        x, _ = sample_reverse_sde(BIMODAL, sched, GuidanceSource(method="exact"), r, 0, cfg)
        w_plus = float(np.mean(x[:, 0] > 0))
        assert abs(w_plus - tilted.weights[1]) < 0.05

    def test_kind_validation(self, std_normal_1d, sched):
        cfg = SamplerConfig(kind="prob_flow_ode")
        with pytest.raises(ValueError):
            sample_reverse_sde(std_normal_1d, sched, GuidanceSource(method="none"), None, 0, cfg)


class TestProbFlowOde:
    def test_gaussian_quantiles_ks(self, std_normal_1d, sched):
        cfg = SamplerConfig(kind="prob_flow_ode", steps=512, batch=2000, seed=3)
        x, _ = sample_prob_flow_ode(
            std_normal_1d, sched, GuidanceSource(method="none"), None, 0, cfg
        )
        ks = ks_statistic(x, std_normal_1d)
        assert ks < 1.63 / np.sqrt(x.shape[0])

    def test_standard_normal_is_a_fixed_point(self, std_normal_1d, sched):
        # for variance-preserving noise on N(0, I) data the drift and the
        # score term cancel exactly: trajectories do not move at all
        cfg = SamplerConfig(kind="prob_flow_ode", steps=32, batch=64, seed=4)
        x, _ = sample_prob_flow_ode(
            std_normal_1d, sched, GuidanceSource(method="none"), None, 0, cfg
        )
        rng = np.random.default_rng(4)
        np.testing.assert_allclose(x, rng.standard_normal((64, 1)), atol=1e-12)

    def test_drift_only_trajectory_is_linear_ode(self, sched):
        # with the score term removed the reverse ODE is dx = f(x, t) dt,
        # whose exact solution is the alpha ratio; Euler converges at O(1/n)
        rng = np.random.default_rng(4)
        x0 = rng.standard_normal((16, 1))
        expected = x0 * float(np.exp(sched.log_alpha(0.2) - sched.log_alpha(1.0)))

        def integrate(steps):
            ts = np.linspace(sched.horizon, 0.2, steps + 1)
            x = x0.copy()
            for k in range(steps):
                dt = float(ts[k] - ts[k + 1])
                x = x - dt * sched.f(x, float(ts[k]))
            return x

        err_coarse = np.max(np.abs(integrate(1024) / expected - 1.0))
        err_fine = np.max(np.abs(integrate(4096) / expected - 1.0))
        assert err_fine < 1e-2
        assert err_coarse / err_fine == pytest.approx(4.0, rel=0.2)

    def test_richardson_step_halving(self, skew_bimodal_1d, sched):
        # endpoint RMS discretization error should halve when steps double
        def endpoint(steps):
            cfg = SamplerConfig(kind="prob_flow_ode", steps=steps, batch=512, seed=5)
            x, _ = sample_prob_flow_ode(
                skew_bimodal_1d, sched, GuidanceSource(method="none"), None, 0, cfg
            )
            return x

        ref = endpoint(16384)
        err_a = np.sqrt(np.mean((endpoint(128) - ref) ** 2))
        err_b = np.sqrt(np.mean((endpoint(256) - ref) ** 2))
        assert 1.5 <= err_a / err_b <= 2.5


class TestFlowSampler:
    def test_unguided_matches_data_moments(self, skew_bimodal_1d):
        cfg = SamplerConfig(kind="flow_euler", steps=64, batch=10_000, seed=6)
        x, _ = sample_flow(skew_bimodal_1d, None, 0, FlowGuidanceSource(method="none"), cfg)
        mean, cov = gm_mean_cov(skew_bimodal_1d)
        se = x.std(ddof=1) / np.sqrt(x.shape[0])
        assert abs(x.mean() - mean[0]) < 3 * se + 5e-3
        sq = (x[:, 0] - x.mean()) ** 2
        se_var = sq.std(ddof=1) / np.sqrt(sq.size)
        assert abs(sq.mean() - cov[0, 0]) < 3 * se_var + 2e-2

    def test_exact_guided_matches_tilted_moments(self, sched):
        r = LinearReward(a=[1.0], beta=1.0)
        tilted = tilt_gm(BIMODAL, r).closed_form
        cfg = SamplerConfig(kind="flow_euler", steps=64, batch=10_000, seed=7)
        x, _ = sample_flow(BIMODAL, r, 0, FlowGuidanceSource(method="exact"), cfg)
        mean, _ = gm_mean_cov(tilted)
        se = x.std(ddof=1) / np.sqrt(x.shape[0])
        assert abs(x.mean() - mean[0]) < 3 * se + 1e-2

    def test_step_sweep_reports_reward_gap(self):
        # coarse integration must still track the target reward direction
        r = LinearReward(a=[1.0], beta=1.0)
        means = {}
        for steps in (4, 64):
            cfg = SamplerConfig(kind="flow_euler", steps=steps, batch=4096, seed=8)
            x, _ = sample_flow(BIMODAL, r, 0, FlowGuidanceSource(method="exact"), cfg)
            means[steps] = float(x.mean())
        tilted_mean = float(gm_mean_cov(tilt_gm(BIMODAL, r).closed_form)[0][0])
        assert abs(means[64] - tilted_mean) <= abs(means[4] - tilted_mean) + 0.02
        assert means[4] > 0  # even 4 steps lands in the tilted mode

    def test_determinism(self):
        cfg = SamplerConfig(kind="flow_euler", steps=16, batch=128, seed=10)
        a, _ = sample_flow(BIMODAL, None, 0, FlowGuidanceSource(method="none"), cfg)
        b, _ = sample_flow(BIMODAL, None, 0, FlowGuidanceSource(method="none"), cfg)
        np.testing.assert_array_equal(a, b)

    def test_degenerate_weights_carry_step_index(self):
        # an absurdly small proposal count at fine resolution cannot fail
        # by underflow here, so force it with an extreme clamp instead
        r = LinearReward(a=[1.0], beta=1.0)
        cfg = SamplerConfig(kind="flow_euler", steps=4, batch=64, seed=11, eps=1e-3)
        # shrink the kernel variance by faking a late start: directly call
        # the estimator to confirm the error type carries position info
        from tiltlab.flow_guidance import fm_guided_velocity_is

        with pytest.raises(DegenerateWeightsError):
            x = np.full((1, 1), 1e8)
            fm_guided_velocity_is(BIMODAL, r, 0, x, 1.0 - 2e-3, 4, 0)


class TestOneStep:
    def test_unguided_is_posterior_mean_and_contracts(self, std_normal_1d, sched):
        cfg = SamplerConfig(kind="one_step", steps=1, batch=20_000, seed=12)
        x, stats = sample_one_step(
            std_normal_1d, sched, GuidanceSource(method="none"), None, 0, cfg
        )
        # E[x0 | xT] for a standard normal prior is alpha xT /(alpha^2+sigma^2)
        a = float(sched.alpha(sched.horizon))
        expected_var = a * a / (a * a + float(sched.sigma2(sched.horizon))) ** 2
        assert x.var() == pytest.approx(expected_var, rel=0.05)
        assert x.var() < 1.0  # strictly below the data variance
        assert stats.alpha_floor_hits == 0

    def test_exact_guidance_shifts_toward_tilt(self, std_normal_1d, sched):
        for a_sign in (+1.0, -1.0):
            r = LinearReward(a=[a_sign * 1.0], beta=1.0)
            cfg = SamplerConfig(kind="one_step", steps=1, batch=4096, seed=13)
            guided, _ = sample_one_step(
                std_normal_1d, sched, GuidanceSource(method="exact"), r, 0, cfg
            )
            plain, _ = sample_one_step(
                std_normal_1d, sched, GuidanceSource(method="none"), None, 0, cfg
            )
            assert np.sign(guided.mean() - plain.mean()) == a_sign

    def test_steps_must_be_one(self):
        with pytest.raises(ValueError):
            SamplerConfig(kind="one_step", steps=2)


class TestGuidanceOffEquivalence:
    @pytest.mark.parametrize("kind", ["reverse_sde", "prob_flow_ode", "flow_euler"])
    def test_unguided_reproduces_reference(self, skew_bimodal_1d, sched, kind):
        from tiltlab.metrics import mmd_rbf

        steps = 32 if kind == "flow_euler" else 256
        cfg = SamplerConfig(kind=kind, steps=steps, batch=1024, seed=30)
        if kind == "flow_euler":
            x, _ = sample_flow(skew_bimodal_1d, None, 0, FlowGuidanceSource(method="none"), cfg)
        elif kind == "reverse_sde":
            x, _ = sample_reverse_sde(
                skew_bimodal_1d, sched, GuidanceSource(method="none"), None, 0, cfg
            )
        else:
            x, _ = sample_prob_flow_ode(
                skew_bimodal_1d, sched, GuidanceSource(method="none"), None, 0, cfg
            )
        reference = gm_sample(skew_bimodal_1d, 2000, np.random.default_rng(31))
        res = mmd_rbf(x, reference, n_permutations=100, seed=0)
        assert res.below_threshold, kind


class TestCsvRoundTrip:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(50, 2))
        path = tmp_path / "samples.csv"
        write_samples_csv(path, x, "abc123", 7)
        back, meta = read_samples_csv(path)
        np.testing.assert_array_equal(back, x)
        assert meta == {"config_hash": "abc123", "seed": "7"}

    def test_header_line_format(self, tmp_path):
        path = tmp_path / "s.csv"
        write_samples_csv(path, np.zeros((2, 1)), "h", 0)
        lines = path.read_text().splitlines()
        assert lines[0] == "# config_hash=h seed=0"
        assert lines[1] == "x_1"
