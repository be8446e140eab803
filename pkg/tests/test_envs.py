"""Environments: verification replay, closed-form oracles, Monte-Carlo checks."""

import math

import numpy as np
import pytest

from helpers import chain_problem, walk_problem
from lenrl import envs
from lenrl.errors import EnvironmentMismatch
from lenrl.policy import ParamLayout, RngStream, init_params, sample_group


def sample_some(problem, cap=16, group_size=8, stop_hazard=0.1, key=(0, 9, 0)):
    layout = ParamLayout.for_cap(cap, problem.n_drift, problem.answer_vocab)
    params = init_params(layout, stop_hazard=stop_hazard)
    return params, sample_group(params, problem, group_size, cap, RngStream(key))


class TestVerify:
    def test_noiseless_exact_hit(self):
        problem = walk_problem(sigma_step=0.0, drift_values=(2.0,))
        params, group = sample_some(problem, cap=8, stop_hazard=0.3)
        for traj in group.trajectories:
            verdict = envs.verify(traj, problem)
            # drifts are exactly 2.0 each, so a hit needs |2L - 10| <= 2
            assert verdict.correct == (abs(2.0 * traj.length - 10.0) <= 2.0)

    def test_under_thinking_limit(self):
        problem = walk_problem()
        params, group = sample_some(problem, cap=8)
        forced = group.trajectories[0]
        forced.tokens = np.array([problem.n_drift, problem.n_drift + 1], dtype=np.int64)
        forced.length = 0
        forced.env_noise = np.zeros((0,))
        verdict = envs.verify(forced, problem)
        assert not verdict.correct  # |mu0 - mu_r| = 10 > delta

    def test_chain_hand_example(self):
        # ops (+3)(x2) mod 10 from 0 -> 6; stopping after both is correct.
        problem = chain_problem()
        assert problem.ac.chain_value() == 6
        params, group = sample_some(problem, cap=6, stop_hazard=0.3)
        for traj in group.trajectories:
            verdict = envs.verify(traj, problem)
            assert verdict.correct == (traj.length >= 2)  # p_corrupt=0: extra steps harmless
            if traj.length >= 2:
                assert verdict.answer_bucket == 6

    def test_replay_is_idempotent(self):
        problem = walk_problem()
        params, group = sample_some(problem, cap=12)
        for traj in group.trajectories:
            a = envs.verify(traj, problem)
            b = envs.verify(traj, problem)
            assert a == b

    def test_problem_mismatch_rejected(self):
        problem = walk_problem()
        params, group = sample_some(problem)
        other = envs.Problem(id="gw-other", kind=envs.GAUSSIAN_WALK, gw=problem.gw)
        with pytest.raises(EnvironmentMismatch):
            envs.verify(group.trajectories[0], other)

    def test_chain_exact_stopping_always_correct(self):
        problem = chain_problem(ops=(("add", 1), ("add", 2), ("mul", 3)), p_corrupt=0.0)
        layout = ParamLayout.for_cap(8, problem.n_drift, problem.answer_vocab)
        params = init_params(layout, stop_hazard=0.01)
        params.stop_logits[:] = -50.0
        params.stop_logits[3] = 50.0  # stop exactly after the 3 ops
        group = sample_group(params, problem, 8, 8, RngStream((0, 10, 0)))
        for traj in group.trajectories:
            assert traj.length == 3
            assert envs.verify(traj, problem).correct


class TestOracleAccuracy:
    def test_point_mass_on_target(self):
        problem = walk_problem(sigma_step=0.0)
        assert envs.oracle_accuracy(problem, drift_mean=1.0, drift_var=0.0, length=10) == 1.0

    def test_zero_length_far_from_target(self):
        problem = walk_problem()
        assert envs.oracle_accuracy(problem, 1.0, 0.0, 0) == 0.0

    def test_hand_value_at_optimum(self):
        # m - mu_r = 0, s = sqrt(10): Phi(2/sqrt(10)) - Phi(-2/sqrt(10)).
        problem = walk_problem()
        z = 2.0 / math.sqrt(10.0)
        expected = math.erf(z / math.sqrt(2.0))  # Phi(z) - Phi(-z)
        got = envs.oracle_accuracy(problem, 1.0, 0.0, 10)
        assert abs(got - expected) < 1e-12
        assert abs(got - 0.4729) < 5e-4

    def test_overshoot_collapses(self):
        problem = walk_problem()
        assert envs.oracle_accuracy(problem, 1.0, 0.0, 40) < 1e-5

    def test_interior_maximum_shape(self):
        problem = walk_problem()
        acc = np.array([envs.oracle_accuracy(problem, 1.0, 0.0, L) for L in range(1, 41)])
        assert int(np.argmax(acc)) + 1 == 10
        assert np.all(np.diff(acc[19:]) < 0)

    def test_rejects_chain(self):
        with pytest.raises(ValueError):
            envs.oracle_accuracy(chain_problem(), 1.0, 0.0, 5)

    def test_monte_carlo_cross_check(self):
        problem = walk_problem()
        rng = np.random.default_rng(41)
        for dm, dv, L in [(1.0, 0.0, 10), (0.5, 0.25, 12), (1.0, 0.5, 20), (2.0, 0.0, 5)]:
            exact = envs.oracle_accuracy(problem, dm, dv, L)
            mc = envs.simulate_walk_accuracy(problem, dm, dv, L, 100_000, rng)
            sigma = math.sqrt(max(exact * (1 - exact), 1e-12) / 100_000)
            assert abs(mc - exact) < 4 * sigma + 1e-9

    def test_policy_rollouts_match_oracle(self):
        # Deterministic drift head: the sampled walk is exactly Gaussian, so
        # rollout accuracy must match the closed form inside binomial noise.
        problem = walk_problem(drift_values=(1.0,))
        layout = ParamLayout.for_cap(10, 1, 1)
        params = init_params(layout)
        params.stop_logits[:] = -50.0  # forced fixed length = cap
        n, hits = 20_000, 0
        stream = RngStream((0, 11, 0))
        for chunk in range(n // 20):
            group = sample_group(params, problem, 20, 10, stream.child(chunk))
            hits += sum(envs.verify(t, problem).correct for t in group.trajectories)
        exact = envs.oracle_accuracy(problem, 1.0, 0.0, 10)
        sigma = math.sqrt(exact * (1 - exact) / n)
        assert abs(hits / n - exact) < 4 * sigma

    def test_variance_additivity(self):
        problem = walk_problem()
        rng = np.random.default_rng(43)
        dm, dv, L = 1.0, 0.5, 16
        y = envs.simulate_walk(problem, dm, dv, L, 100_000, rng)
        expected = L * (dv + problem.gw.sigma_step**2)
        assert abs(y.var() / expected - 1.0) < 0.05


class TestOracleDispersion:
    def test_degenerate_distribution(self):
        problem = walk_problem(sigma_step=0.0)
        rng = np.random.default_rng(47)
        point = envs.oracle_dispersion(problem, 1.0, 0.0, 10, 1000, rng)
        assert point.answer_entropy_nats == 0.0
        assert point.mode_share == 1.0

    def test_wide_buckets_center_on_target(self):
        problem = walk_problem(bin_width=50.0)
        rng = np.random.default_rng(53)
        point = envs.oracle_dispersion(problem, 1.0, 0.0, 10, 20_000, rng)
        assert point.mode_accuracy == 1

    def test_entropy_grows_with_length_when_on_target(self):
        # mu_r sits mid-bucket so the modal bucket is unambiguous.
        problem = walk_problem(mu_r=11.0)
        rng = np.random.default_rng(59)
        entropies, shares = [], []
        for L in (10, 20, 40):
            point = envs.oracle_dispersion(problem, 11.0 / L, 0.0, L, 100_000, rng)
            entropies.append(point.answer_entropy_nats)
            shares.append(point.mode_share)
            assert point.mode_accuracy == 1
        assert entropies[0] < entropies[1] < entropies[2]
        assert shares[0] > shares[1] > shares[2]


class TestPairedTruncationOnRollouts:
    def test_rates_from_population_sampled_at_larger_cap(self):
        from lenrl.metrics import paired_truncation

        problem = walk_problem()
        layout = ParamLayout.for_cap(24, problem.n_drift, problem.answer_vocab)
        params = init_params(layout, stop_hazard=0.08)
        trajs = []
        stream = RngStream((5, 12, 0))
        for chunk in range(25):
            group = sample_group(params, problem, 8, 24, stream.child(chunk))
            trajs.extend(group.trajectories)
        r1, r2 = paired_truncation(trajs, cap1=12, cap2=24)
        assert r1 >= r2
        assert r2 == np.mean([t.truncated for t in trajs])
        assert r1 == np.mean([t.length >= 12 for t in trajs])


class TestProblemGeneration:
    def test_deterministic_per_index(self):
        cfg = envs.EnvConfig(kind=envs.ARITHMETIC_CHAIN)
        a = envs.make_problem(cfg, 3, seed=7)
        b = envs.make_problem(cfg, 3, seed=7)
        c = envs.make_problem(cfg, 4, seed=7)
        assert a == b
        assert a != c

    def test_walk_jitter_moves_target(self):
        cfg = envs.EnvConfig(gw_mu_r_jitter=2.0)
        targets = {envs.make_problem(cfg, i, seed=0).gw.mu_r for i in range(8)}
        assert len(targets) > 1
        assert all(abs(t - 10.0) <= 2.0 for t in targets)

    def test_gaussian_reward_mode(self):
        problem = walk_problem(sigma_step=0.0, drift_values=(1.0,))
        params, group = sample_some(problem, cap=12, stop_hazard=0.2, key=(1, 2, 3))
        for traj in group.trajectories:
            verdict = envs.verify(traj, problem)
            r = envs.reward_value(traj, problem, verdict, envs.REWARD_GAUSSIAN)
            z = (traj.length - 10.0) / 2.0  # y = length here, sigma_r = delta
            assert abs(r - math.exp(-0.5 * z * z)) < 1e-12
