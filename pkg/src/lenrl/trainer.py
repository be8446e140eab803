"""Training loop binding policy, environments, objectives, shaping, metrics.

One outer step: sample a group per batch problem, verify, fold the groups
into the online length/accuracy estimators, shape rewards with the active
length-control method, estimate advantages, drop zero-signal groups, then run
``updates_per_batch`` inner gradient updates on the frozen batch. The
rollout-vs-learner probability gap is recorded before every inner update, so
the off-policy staleness introduced by reusing a batch is a first-class
measurement: with a single update per batch it is exactly zero.

Evaluation samples a fixed held-out problem set (generated from a disjoint
index range of the same seeded generator) and reports accuracy, mean length,
and the full dispersion battery.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import envs, metrics, objectives, shaping
from .config import ADV_RLOO, TrainConfig
from .errors import ConfigError, DegenerateGroup, DivergenceError
from .objectives import Group
from .policy import (
    INIT_NEAR_TARGET,
    OptimizerState,
    ParamLayout,
    PolicyParams,
    RngStream,
    apply_update,
    grad_weighted_logprob,
    init_params,
    sample_group,
    sequence_logprobs,
)

# Stream tags keep sampling purposes on disjoint randomness.
TRAIN_TAG = 0
EVAL_TAG = 1
PILOT_TAG = 3

# Held-out problems come from an index range train problems never touch.
EVAL_INDEX_BASE = 1_000_000

# Auto cap rule: at most this truncation fraction on a step-0 pilot.
PILOT_TRUNCATION_TARGET = 0.05


@dataclass
class StepRecord:
    """Diagnostics for one outer training step."""

    step: int
    mean_reward: float
    mean_length: float
    accuracy: float
    length_bias: float | None
    prob_gaps: list[float]
    dropped_groups: int
    n_groups: int
    surrogate_value: float | None
    diagnostics: dict[str, float]
    metrics: dict[str, float | None]

    @property
    def prob_gap(self) -> float:
        return float(np.mean(self.prob_gaps)) if self.prob_gaps else 0.0


@dataclass
class EvalResult:
    report: metrics.DispersionReport
    accuracy: float
    mean_length: float
    mean_reward: float


@dataclass
class TrainState:
    cfg: TrainConfig  # resolved: cap and dependents are concrete
    problems: list[envs.Problem]
    params: PolicyParams
    opt: OptimizerState
    length_stats: shaping.LengthStats
    acc_tracker: shaping.AccuracyTracker
    step: int = 0


def _target_drift_index(env_cfg: envs.EnvConfig) -> int:
    values = np.asarray(env_cfg.gw_drift_values, dtype=float)
    return int(np.argmin(np.abs(values - env_cfg.gw_target_drift)))


def _make_params(cfg: TrainConfig, cap: int) -> PolicyParams:
    probe = envs.make_problem(cfg.env, 0, cfg.seed)
    layout = ParamLayout.for_cap(cap, probe.n_drift, probe.answer_vocab, cfg.bucket_size)
    target = _target_drift_index(cfg.env) if cfg.policy_init == INIT_NEAR_TARGET else None
    return init_params(
        layout,
        mode=cfg.policy_init,
        stop_hazard=cfg.init_stop_hazard,
        drift_bias=cfg.init_drift_bias,
        target_index=target,
    )


def pick_cap(cfg: TrainConfig) -> int:
    """Smallest cap with under-5% truncation on a pilot of step-0 rollouts."""
    params = _make_params(cfg, cfg.pilot_cap)
    problems = [envs.make_problem(cfg.env, i, cfg.seed) for i in range(cfg.train_problems)]
    lengths: list[int] = []
    stream = RngStream((cfg.seed, PILOT_TAG))
    group_size = max(2, cfg.group_size)
    n_groups = max(1, -(-cfg.pilot_rollouts // group_size))
    for j in range(n_groups):
        problem = problems[j % len(problems)]
        group = sample_group(params, problem, group_size, cfg.pilot_cap, stream.child(j))
        lengths.extend(t.length for t in group.trajectories)
    lens = np.asarray(lengths[: cfg.pilot_rollouts], dtype=float)
    cap = int(np.quantile(lens, 1.0 - PILOT_TRUNCATION_TARGET)) + 1
    while cap < cfg.pilot_cap and np.mean(lens >= cap) >= PILOT_TRUNCATION_TARGET:
        cap += 1
    return min(cap, cfg.pilot_cap)


def resolve_config(cfg: TrainConfig) -> TrainConfig:
    """Fill in every auto value (cap, shaping.max_len, env.gw.bin_width) so the
    written config is a fixed point of load -> resolve."""
    cap = cfg.cap if cfg.cap is not None else pick_cap(cfg)
    env = cfg.env
    if env.gw_bin_width is None:
        env = replace(env, gw_bin_width=env.gw_delta)
    shape_cfg = cfg.shaping
    if shape_cfg.max_len is None:
        shape_cfg = replace(shape_cfg, max_len=cap)
    elif shape_cfg.method == shaping.METHOD_DRPO and shape_cfg.max_len < cap:
        raise ConfigError("shaping.max_len", "must cover the generation cap for drpo weights")
    return replace(cfg, cap=cap, env=env, shaping=shape_cfg)


def init_state(cfg: TrainConfig) -> TrainState:
    cfg = resolve_config(cfg)
    problems = [envs.make_problem(cfg.env, i, cfg.seed) for i in range(cfg.train_problems)]
    params = _make_params(cfg, cfg.cap)
    return TrainState(
        cfg=cfg,
        problems=problems,
        params=params,
        opt=OptimizerState.zeros(params.layout),
        length_stats=shaping.LengthStats(),
        acc_tracker=shaping.AccuracyTracker(cfg.group_size),
    )


def _shape_rewards(state: TrainState, group: Group, verdicts: list[envs.Verdict], problem: envs.Problem) -> np.ndarray:
    cfg = state.cfg
    method = cfg.shaping.method
    lens = [t.length for t in group.trajectories]
    if method == shaping.METHOD_RLOO_LP:
        return np.array(
            [
                shaping.rloo_lp_reward(v.correct, ln, state.length_stats, problem.id, cfg.shaping.alpha)
                for v, ln in zip(verdicts, lens)
            ]
        )
    if method == shaping.METHOD_ALP:
        if cfg.shaping.alp_acc_mode == shaping.ACC_PER_BATCH:
            acc = float(np.mean([v.correct for v in verdicts]))
        else:
            acc = state.acc_tracker.acc(problem.id)
        return np.array(
            [
                shaping.alp_reward(v.correct, ln, acc, cfg.group_size, cfg.shaping.beta)
                for v, ln in zip(verdicts, lens)
            ]
        )
    # none / drpo / disco / gfpo run on the base reward.
    return np.array(
        [envs.reward_value(t, problem, v, cfg.env.reward) for t, v in zip(group.trajectories, verdicts)]
    )


def _estimate_advantages(cfg: TrainConfig, group: Group) -> np.ndarray:
    if cfg.advantage == ADV_RLOO:
        return objectives.rloo_advantage(group.rewards)
    return objectives.group_norm_advantage(group.rewards)


def _length_bias_or_none(correct_lens, incorrect_lens) -> float | None:
    # Undefined both for one-sided batches and for all-zero lengths.
    try:
        return metrics.length_bias(correct_lens, incorrect_lens)
    except ValueError:
        return None


def _batch_dispersion(
    group_buckets: list[list[int]], truths: list[int], group_lens: list[list[int]], cap: int
) -> dict[str, float | None]:
    """Train-phase dispersion columns computed from the sampled batch."""
    points = [
        metrics.dispersion_point(metrics.AnswerHistogram.from_answers(buckets, truth))
        for buckets, truth in zip(group_buckets, truths)
    ]
    out: dict[str, float | None] = {
        "mode_accuracy": float(np.mean([p.mode_accuracy for p in points])),
        "answer_entropy_nats": float(np.mean([p.answer_entropy_nats for p in points])),
        "mode_share": float(np.mean([p.mode_share for p in points])),
    }
    try:
        overall, within, between = metrics.cv_decomposition(group_lens)
        out.update(cv_overall=overall, cv_within=within, cv_between=between)
    except ValueError:
        out.update(cv_overall=None, cv_within=None, cv_between=None)
    all_lens = [ln for lens in group_lens for ln in lens]
    out["truncation_rate"] = metrics.truncation_rate(all_lens, cap)
    return out


def _disco_batch(
    groups: list[Group],
    cur_logprobs: list[list[np.ndarray]],
    shape_cfg: shaping.ShapingConfig,
) -> tuple[float, list[list[np.ndarray]], int]:
    """Decoupled sequence-level objective over a batch.

    Per group: scores are per-token mean log-probs; correct sequences carry
    length weights (uniform for the disco variant), wrong sequences enter a
    soft penalty. Gradient weights are spread over each sequence's tokens via
    the score's 1/token-count factor. Degenerate groups (no correct or no
    wrong sequences) are skipped and counted.
    """
    usable: list[tuple[Group, list[np.ndarray], float, np.ndarray, np.ndarray, list[int], list[int]]] = []
    skipped = 0
    for g, curs in zip(groups, cur_logprobs):
        scores = np.array([float(np.mean(c)) for c in curs])
        correct_idx = [i for i in range(g.size) if g.correct_mask[i]]
        wrong_idx = [i for i in range(g.size) if not g.correct_mask[i]]
        if shape_cfg.method == shaping.METHOD_DISCO:
            weights = np.ones(len(correct_idx))
        else:
            weights = np.array(
                [
                    shaping.drpo_weight(g.trajectories[i].length, shape_cfg.max_len, shape_cfg.lam)
                    for i in correct_idx
                ]
            )
        try:
            value, corr_w, wrong_w = shaping.disco_drpo_objective(
                scores[correct_idx], scores[wrong_idx], weights, shape_cfg.tau
            )
        except DegenerateGroup:
            skipped += 1
            continue
        usable.append((g, curs, value, corr_w, wrong_w, correct_idx, wrong_idx))
    if not usable:
        return 0.0, [], skipped
    total = 0.0
    out_weights: list[list[np.ndarray]] = []
    scale = 1.0 / len(usable)
    for g, curs, value, corr_w, wrong_w, correct_idx, wrong_idx in usable:
        total += value
        seq_w = np.zeros(g.size)
        seq_w[correct_idx] = corr_w
        seq_w[wrong_idx] = wrong_w
        out_weights.append(
            [
                np.full(len(curs[i]), scale * seq_w[i] / len(curs[i]))
                for i in range(g.size)
            ]
        )
    return total * scale, out_weights, skipped


def train_step(state: TrainState) -> StepRecord:
    """Run one outer step, mutating the state in place.

    A batch where every group is dropped leaves the parameters untouched.
    Divergence raises ``DivergenceError`` carrying this step's index.
    """
    cfg = state.cfg
    step = state.step
    n = len(state.problems)
    batch_idx = [(step * cfg.problems_per_batch + j) % n for j in range(cfg.problems_per_batch)]

    groups: list[Group] = []
    group_buckets: list[list[int]] = []
    truths: list[int] = []
    all_lens: list[list[int]] = []
    correct_lens: list[int] = []
    incorrect_lens: list[int] = []
    for pi in batch_idx:
        problem = state.problems[pi]
        stream = RngStream((cfg.seed, TRAIN_TAG, step, pi))
        group = sample_group(state.params, problem, cfg.group_size, cfg.cap, stream)
        verdicts = [envs.verify(t, problem) for t in group.trajectories]
        group.correct_mask = np.array([v.correct for v in verdicts], dtype=bool)
        shaping.update_online_stats(state.length_stats, state.acc_tracker, group)
        group.rewards = _shape_rewards(state, group, verdicts, problem)
        groups.append(group)
        group_buckets.append([v.answer_bucket for v in verdicts])
        truths.append(problem.truth_bucket())
        lens = [t.length for t in group.trajectories]
        all_lens.append(lens)
        correct_lens.extend(ln for ln, v in zip(lens, verdicts) if v.correct)
        incorrect_lens.extend(ln for ln, v in zip(lens, verdicts) if not v.correct)

    flat_lens = [ln for lens in all_lens for ln in lens]
    flat_correct = np.concatenate([g.correct_mask for g in groups])
    batch_rewards = np.concatenate([g.rewards for g in groups])
    record_metrics = _batch_dispersion(group_buckets, truths, all_lens, cfg.cap)
    record_metrics["length_bias"] = _length_bias_or_none(correct_lens, incorrect_lens)

    dropped = 0
    if cfg.shaping.method == shaping.METHOD_GFPO:
        groups = [
            shaping.gfpo_filter(g, cfg.shaping.k, cfg.shaping.drop_incorrect) for g in groups
        ]
        small = [g for g in groups if g.size < 2]
        dropped += len(small)  # singleton/empty retained sets carry no group signal
        groups = [g for g in groups if g.size >= 2]

    use_disco = cfg.shaping.method in (shaping.METHOD_DRPO, shaping.METHOD_DISCO)
    if not use_disco:
        for g in groups:
            g.advantages = _estimate_advantages(cfg, g)
    kept = objectives.dynamic_sampling_filter(groups)
    dropped += len(groups) - len(kept)

    diagnostics: dict[str, float] = {}
    prob_gaps: list[float] = []
    surrogate_value: float | None = None
    if kept:
        flat_trajs = [t for g in kept for t in g.trajectories]
        rollout = [[t.rollout_logprobs for t in g.trajectories] for g in kept]
        flat_rollout = np.concatenate([t.rollout_logprobs for t in flat_trajs])
        for _ in range(cfg.surrogate.updates_per_batch):
            cur = [
                [sequence_logprobs(state.params, t) for t in g.trajectories] for g in kept
            ]
            prob_gaps.append(metrics.prob_gap(flat_rollout, np.concatenate([c for gc in cur for c in gc])))
            if use_disco:
                value, weights, skipped = _disco_batch(kept, cur, cfg.shaping)
                if not weights:
                    dropped += skipped
                    break
            else:
                value, weights = objectives.clipped_surrogate(kept, rollout, cur, cfg.surrogate)
                if cfg.surrogate.tis_cap is not None:
                    # The sampler and the learner share one exact likelihood
                    # here, so the reference log-probs equal the recorded
                    # rollout ones and the correction is an identity.
                    weights = objectives.tis_correct(
                        weights, rollout, rollout, cfg.surrogate.tis_cap, cfg.surrogate.tis_mode
                    )
            surrogate_value = value
            flat_weights = [w for gw in weights for w in gw]
            grad = grad_weighted_logprob(state.params, flat_trajs, flat_weights)
            try:
                state.params, state.opt = apply_update(state.params, grad, state.opt, cfg.lr)
            except DivergenceError:
                raise DivergenceError(step=step) from None

    if cfg.shaping.method == shaping.METHOD_DRPO and kept:
        diagnostics["mean_drpo_weight"] = float(
            np.mean(
                [
                    shaping.drpo_weight(t.length, cfg.shaping.max_len, cfg.shaping.lam)
                    for g in kept
                    for t in g.trajectories
                ]
            )
        )

    record = StepRecord(
        step=step,
        mean_reward=float(batch_rewards.mean()),
        mean_length=float(np.mean(flat_lens)),
        accuracy=float(np.mean(flat_correct)),
        length_bias=record_metrics["length_bias"],
        prob_gaps=prob_gaps,
        dropped_groups=dropped,
        n_groups=cfg.problems_per_batch,
        surrogate_value=surrogate_value,
        diagnostics=diagnostics,
        metrics=record_metrics,
    )
    state.step += 1
    return record


def evaluate(params: PolicyParams, cfg: TrainConfig, step: int | None = None) -> EvalResult:
    """Sample the held-out problems and compute the dispersion battery.

    Fully determined by (cfg, seed, step); rollout and evaluation policies
    coincide, so the probability gap is zero by construction.
    """
    if cfg.cap is None:
        cfg = resolve_config(cfg)
    at_step = cfg.steps if step is None else step
    problems = [
        envs.make_problem(cfg.env, EVAL_INDEX_BASE + i, cfg.seed) for i in range(cfg.eval_problems)
    ]
    group_buckets: list[list[int]] = []
    truths: list[int] = []
    group_lens: list[list[int]] = []
    correct_lens: list[float] = []
    incorrect_lens: list[float] = []
    rewards: list[float] = []
    n_correct = 0
    n_total = 0
    for i, problem in enumerate(problems):
        stream = RngStream((cfg.seed, EVAL_TAG, at_step, i))
        group = sample_group(
            params, problem, cfg.eval_samples, cfg.cap, stream, temperature=cfg.eval_temperature
        )
        verdicts = [envs.verify(t, problem) for t in group.trajectories]
        group_buckets.append([v.answer_bucket for v in verdicts])
        truths.append(problem.truth_bucket())
        lens = [t.length for t in group.trajectories]
        group_lens.append(lens)
        for t, v, ln in zip(group.trajectories, verdicts, lens):
            rewards.append(envs.reward_value(t, problem, v, cfg.env.reward))
            (correct_lens if v.correct else incorrect_lens).append(ln)
            n_correct += int(v.correct)
            n_total += 1

    disp = _batch_dispersion(group_buckets, truths, group_lens, cfg.cap)
    all_lens = [ln for lens in group_lens for ln in lens]
    report = metrics.DispersionReport(
        mode_accuracy=disp["mode_accuracy"],
        answer_entropy_nats=disp["answer_entropy_nats"],
        mode_share=disp["mode_share"],
        length_bias=_length_bias_or_none(correct_lens, incorrect_lens),
        cv_overall=disp["cv_overall"],
        cv_within=disp["cv_within"],
        cv_between=disp["cv_between"],
        truncation_rate=disp["truncation_rate"],
        prob_gap=0.0,
    )
    return EvalResult(
        report=report,
        accuracy=n_correct / n_total,
        mean_length=float(np.mean(all_lens)),
        mean_reward=float(np.mean(rewards)),
    )
