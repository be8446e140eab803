"""Length-control methods: shaped rewards, sequence weights, group filtering."""

import math

import numpy as np
import pytest

from helpers import synthetic_traj
from lenrl.errors import DegenerateGroup
from lenrl.objectives import Group
from lenrl.policy import ParamLayout
from lenrl.shaping import (
    AccuracyTracker,
    LengthStats,
    ShapingConfig,
    alp_reward,
    disco_drpo_objective,
    drpo_weight,
    gfpo_filter,
    rloo_lp_reward,
    update_online_stats,
)

LAYOUT = ParamLayout(n_buckets=16, n_drift=2, n_answer=3)


def verified_group(lengths, correct, problem_id="p"):
    trajs = [synthetic_traj(LAYOUT, [0] * ln) for ln in lengths]
    return Group(
        problem_id=problem_id,
        trajectories=trajs,
        rewards=np.asarray(correct, dtype=float),
        correct_mask=np.asarray(correct, dtype=bool),
    )


def seeded_stats(problem_id="p", lengths=(10.0, 20.0), repeats=3):
    stats = LengthStats()
    for _ in range(repeats):
        stats.observe(problem_id, np.asarray(lengths, dtype=float))
    return stats


class TestRlooLpReward:
    def test_alpha_zero_is_binary(self):
        stats = seeded_stats()
        for length in (0, 5, 500):
            assert rloo_lp_reward(True, length, stats, "p", 0.0) == 1.0
            assert rloo_lp_reward(False, length, stats, "p", 0.0) == 0.0

    def test_mean_length_gets_half_penalty(self):
        stats = seeded_stats(lengths=(10.0, 20.0))  # mean 15, std 5
        alpha = 0.4
        got = rloo_lp_reward(True, 15, stats, "p", alpha)
        assert abs(got - (1.0 - 0.5 * alpha)) < 1e-12

    def test_incorrect_scores_zero(self):
        stats = seeded_stats()
        assert rloo_lp_reward(False, 3, stats, "p", 0.9) == 0.0

    def test_bounded_and_decreasing(self):
        stats = seeded_stats(lengths=(8.0, 16.0))
        alpha = 0.7
        rewards = [rloo_lp_reward(True, ln, stats, "p", alpha) for ln in range(0, 40)]
        assert all(0.0 <= r <= 1.0 for r in rewards)
        assert all(a >= b for a, b in zip(rewards, rewards[1:]))

    def test_std_clamped_to_one_token(self):
        stats = LengthStats()
        for _ in range(3):
            stats.observe("p", [12.0, 12.0])  # degenerate stream: std 0
        got = rloo_lp_reward(True, 13, stats, "p", 0.5)
        expected = 1.0 - 0.5 / (1.0 + math.exp(-1.0))  # z = (13-12)/max(std,1)
        assert abs(got - expected) < 1e-12

    def test_global_fallback_before_two_updates(self):
        stats = LengthStats()
        stats.observe("other", [30.0, 40.0])
        stats.observe("other", [30.0, 40.0])
        stats.observe("p", [10.0, 10.0])  # only one update for p
        mean, _ = stats.mean_std("p")
        # global estimate stands in (pooled EMA: 0.9 * 35 + 0.1 * 10)
        assert abs(mean - 32.5) < 1e-12
        stats.observe("p", [10.0, 10.0])
        mean, _ = stats.mean_std("p")
        assert mean == 10.0  # own estimate after the second update


class TestAlpReward:
    def test_hand_value(self):
        assert abs(alp_reward(True, 100, 0.5, 16, 1e-4) - 0.995) < 1e-12

    def test_minimum_penalty_floor(self):
        # acc = 0 still pays via the 1/G floor.
        got = alp_reward(True, 160, 0.0, 16, 1e-3)
        assert abs(got - (1.0 - 1e-3 * 160 / 16)) < 1e-12

    def test_zero_length_limit(self):
        assert alp_reward(True, 0, 0.7, 8, 0.5) == 1.0
        assert alp_reward(False, 0, 0.7, 8, 0.5) == 0.0

    def test_never_exceeds_indicator_and_decreases(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            correct = bool(rng.integers(2))
            acc = float(rng.random())
            beta = float(rng.uniform(0, 1e-2))
            lens = np.sort(rng.integers(0, 500, size=5))
            rewards = [alp_reward(correct, int(ln), acc, 16, beta) for ln in lens]
            assert all(r <= float(correct) + 1e-12 for r in rewards)
            assert all(a >= b for a, b in zip(rewards, rewards[1:]))

    def test_floor_region_exact(self):
        for acc in (0.0, 0.01, 1 / 16 - 1e-9):
            got = alp_reward(False, 320, acc, 16, 2e-3)
            assert abs(got - (-2e-3 * 320 / 16)) < 1e-15


class TestDrpoWeight:
    def test_unit_at_cap(self):
        assert drpo_weight(512, 512, 0.7) == 1.0

    def test_huge_lambda_collapses_to_one(self):
        for ln in (52, 128, 300, 512):
            assert abs(drpo_weight(ln, 512, 1e9) - 1.0) < 1e-9

    def test_infinite_lambda_exactly_one(self):
        for ln in (0, 256, 512):
            assert drpo_weight(ln, 512, math.inf) == 1.0

    def test_hand_value(self):
        assert abs(drpo_weight(256, 512, 0.5) - math.e) < 1e-12

    def test_strictly_decreasing(self):
        w = [drpo_weight(ln, 100, 0.8) for ln in range(0, 101, 5)]
        assert all(a > b for a, b in zip(w, w[1:]))

    def test_over_cap_rejected(self):
        with pytest.raises(ValueError):
            drpo_weight(513, 512, 1.0)


class TestDiscoDrpoObjective:
    def test_uniform_weights_plain_mean(self):
        c = np.array([-1.0, -2.0, -0.5])
        w = np.array([-3.0, -4.0])
        value, corr_w, wrong_w = disco_drpo_objective(c, w, np.ones(3), tau=2.0)
        lse = 2.0 * math.log(math.exp(-1.5) + math.exp(-2.0))
        assert abs(value - (c.mean() - lse)) < 1e-12
        assert np.allclose(corr_w, 1 / 3)

    def test_single_wrong_sequence_any_tau(self):
        for tau in (0.1, 1.0, 7.0):
            value, _, wrong_w = disco_drpo_objective([-1.0], [-3.0], [1.0], tau)
            assert abs(value - (-1.0 - (-3.0))) < 1e-12
            assert np.allclose(wrong_w, [-1.0])

    def test_hand_value(self):
        # weights (e, 1) on scores (-1, -2), one wrong score -3, tau 1:
        # (e*(-1) + 1*(-2)) / (e + 1) + 3 ~= 1.731
        value, corr_w, wrong_w = disco_drpo_objective(
            [-1.0, -2.0], [-3.0], [math.e, 1.0], tau=1.0
        )
        expected = (math.e * -1.0 + -2.0) / (math.e + 1.0) + 3.0
        assert abs(value - expected) < 1e-12
        assert abs(expected - 1.7310585786300049) < 1e-12

    def test_correct_weights_positive_sum_one(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            c = rng.normal(-2.0, 1.0, size=rng.integers(1, 8))
            w = rng.normal(-2.0, 1.0, size=rng.integers(1, 8))
            om = rng.uniform(0.1, 5.0, size=c.size)
            _, corr_w, wrong_w = disco_drpo_objective(c, w, om, tau=rng.uniform(0.1, 3.0))
            assert np.all(corr_w > 0)
            assert abs(corr_w.sum() - 1.0) < 1e-12
            assert np.all(wrong_w < 0)
            assert abs(wrong_w.sum() + 1.0) < 1e-9

    def test_empty_side_skips_group(self):
        with pytest.raises(DegenerateGroup):
            disco_drpo_objective([], [-1.0], [], tau=1.0)
        with pytest.raises(DegenerateGroup):
            disco_drpo_objective([-1.0], [], [1.0], tau=1.0)

    def test_gradient_matches_finite_differences(self):
        # d value / d score for both sides, checked against central diffs.
        rng = np.random.default_rng(13)
        c = rng.normal(-2.0, 0.5, 4)
        w = rng.normal(-2.5, 0.5, 3)
        om = rng.uniform(0.5, 2.0, 4)
        tau = 0.8
        _, corr_w, wrong_w = disco_drpo_objective(c, w, om, tau)
        h = 1e-6
        for i in range(4):
            up, down = c.copy(), c.copy()
            up[i] += h
            down[i] -= h
            fd = (disco_drpo_objective(up, w, om, tau)[0] - disco_drpo_objective(down, w, om, tau)[0]) / (2 * h)
            assert abs(fd - corr_w[i]) < 1e-6
        for j in range(3):
            up, down = w.copy(), w.copy()
            up[j] += h
            down[j] -= h
            fd = (disco_drpo_objective(c, up, om, tau)[0] - disco_drpo_objective(c, down, om, tau)[0]) / (2 * h)
            assert abs(fd - wrong_w[j]) < 1e-6


class TestGfpoFilter:
    def test_keeps_k_shortest_correct(self):
        rng = np.random.default_rng(17)
        lengths = rng.integers(1, 100, size=16).tolist()
        correct = [True] * 12 + [False] * 4
        rng.shuffle(correct)
        group = verified_group(lengths, correct)
        out = gfpo_filter(group, k=8, drop_incorrect=True)
        assert out.size == 8
        assert np.all(out.correct_mask)
        kept_lens = sorted(t.length for t in out.trajectories)
        correct_lens = sorted(ln for ln, c in zip(lengths, correct) if c)
        assert kept_lens == correct_lens[:8]

    def test_small_correct_pool_kept_whole(self):
        group = verified_group([5, 9, 2, 7], [True, False, True, True])
        out = gfpo_filter(group, k=8)
        assert out.size == 3
        assert sorted(t.length for t in out.trajectories) == [2, 5, 7]

    def test_tie_break_by_sample_index(self):
        group = verified_group([4, 4, 4], [True, True, True])
        out = gfpo_filter(group, k=2)
        # lower sample indices win the tie
        assert [t is group.trajectories[i] for t, i in zip(out.trajectories, (0, 1))] == [True, True]

    def test_keep_incorrect_variant(self):
        group = verified_group([5, 9, 2, 7], [True, False, True, False])
        out = gfpo_filter(group, k=1, drop_incorrect=False)
        assert out.size == 3
        assert [bool(c) for c in out.correct_mask] == [False, True, False]
        assert [t.length for t in out.trajectories] == [9, 2, 7]

    def test_dropped_lengths_dominate_kept(self):
        rng = np.random.default_rng(19)
        for _ in range(50):
            n = int(rng.integers(4, 20))
            lengths = rng.integers(0, 60, size=n).tolist()
            correct = rng.random(n) < 0.6
            group = verified_group(lengths, correct.tolist())
            k = int(rng.integers(1, 10))
            out = gfpo_filter(group, k=k, drop_incorrect=True)
            kept = [t.length for t in out.trajectories]
            assert len(kept) == min(k, int(correct.sum()))
            dropped = sorted(
                ln for ln, c in zip(lengths, correct) if c
            )[len(kept):]
            if kept and dropped:
                assert max(kept) <= min(dropped)

    def test_advantages_reset(self):
        group = verified_group([1, 2, 3], [True, True, False])
        group.advantages = np.ones(3)
        out = gfpo_filter(group, k=2)
        assert out.advantages is None


class TestOnlineStats:
    def test_cold_start_equals_group_stats(self):
        stats = LengthStats()
        tracker = AccuracyTracker(group_size=4)
        group = verified_group([10, 20, 30, 40], [True, True, False, False])
        update_online_stats(stats, tracker, group)
        mean, std = stats.mean_std("p")
        # only one update: the global estimate answers, seeded by this group
        assert mean == 15.0
        assert abs(std - 5.0) < 1e-12
        assert tracker.acc("p") == 0.5

    def test_zero_correct_group(self):
        stats = LengthStats()
        tracker = AccuracyTracker(group_size=2)
        seeded = verified_group([10, 20], [True, True])
        update_online_stats(stats, tracker, seeded)
        before = stats.mean_std("p")
        update_online_stats(stats, tracker, verified_group([50, 60], [False, False]))
        assert stats.mean_std("p") == before
        assert abs(tracker.acc("p") - (0.9 * 1.0 + 0.1 * 0.0)) < 1e-12

    def test_ema_converges_to_constant_stream(self):
        stats = LengthStats()
        tracker = AccuracyTracker(group_size=4)
        update_online_stats(stats, tracker, verified_group([100, 200, 300, 400], [True] * 4))
        group = verified_group([10, 20, 30, 40], [True, True, True, False])
        for _ in range(200):
            update_online_stats(stats, tracker, group)
        mean, std = stats.mean_std("p")
        assert abs(mean - 20.0) < 1e-6
        assert abs(std - np.array([10.0, 20.0, 30.0]).std()) < 1e-6
        assert abs(tracker.acc("p") - 0.75) < 1e-6


class TestShapingConfig:
    def test_constraints(self):
        with pytest.raises(ValueError):
            ShapingConfig(method="cosine")
        with pytest.raises(ValueError):
            ShapingConfig(alpha=1.0)
        with pytest.raises(ValueError):
            ShapingConfig(beta=-1e-6)
        with pytest.raises(ValueError):
            ShapingConfig(lam=0.0)
        with pytest.raises(ValueError):
            ShapingConfig(k=0)
