"""Group-relative advantages and clipped policy-gradient surrogates.

Everything here is a pure function over one rollout batch. Advantages are
estimated per group (the responses sampled for one problem), the surrogate is
the usual ratio-clipped objective in two normalization modes, and truncated
importance sampling optionally corrects for a rollout/learner probability gap.

Sign convention: surrogate values are objectives to MAXIMIZE, and the returned
per-token weights are exactly dJ/d(cur_logprob), so feeding them to
``policy.grad_weighted_logprob`` yields the ascent gradient of the objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import DivergenceError

if TYPE_CHECKING:
    from .policy import Trajectory

NORM_SAMPLE_AVG = "sample_avg"
NORM_TOKEN_AVG = "token_avg"
TIS_TOKEN = "token"
TIS_SEQUENCE = "sequence"

# Below this, a group's reward spread is treated as zero signal.
STD_FLOOR = 1e-8


@dataclass
class Group:
    """The G trajectories sampled for one problem, with per-sample rewards.

    ``rewards``/``correct_mask`` are filled after verification and shaping;
    ``advantages`` only after an estimator runs.
    """

    problem_id: str
    trajectories: list["Trajectory"]
    rewards: np.ndarray | None = None
    advantages: np.ndarray | None = None
    correct_mask: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.trajectories)

    def _check_vec(self, name: str, v: np.ndarray | None):
        if v is not None and len(v) != self.size:
            raise ValueError(f"{name} length {len(v)} != group size {self.size}")

    def validate(self):
        self._check_vec("rewards", self.rewards)
        self._check_vec("advantages", self.advantages)
        self._check_vec("correct_mask", self.correct_mask)


@dataclass(frozen=True)
class SurrogateConfig:
    """Loss normalization mode, clip range, and off-policy knobs."""

    norm_mode: str = NORM_TOKEN_AVG
    eps_low: float = 0.2
    eps_high: float = 0.28
    tis_cap: float | None = None  # None disables the correction
    tis_mode: str = TIS_TOKEN
    updates_per_batch: int = 1

    def __post_init__(self):
        if self.norm_mode not in (NORM_SAMPLE_AVG, NORM_TOKEN_AVG):
            raise ValueError(f"unknown norm_mode {self.norm_mode!r}")
        if not (0.0 < self.eps_low <= self.eps_high < 1.0):
            raise ValueError("need 0 < eps_low <= eps_high < 1")
        if self.tis_cap is not None and self.tis_cap < 1.0:
            raise ValueError("tis_cap must be >= 1 when enabled")
        if self.tis_mode not in (TIS_TOKEN, TIS_SEQUENCE):
            raise ValueError(f"unknown tis_mode {self.tis_mode!r}")
        if self.updates_per_batch < 1:
            raise ValueError("updates_per_batch must be >= 1")


def group_norm_advantage(rewards) -> np.ndarray:
    """(r - mean) / population std; all zeros when the spread is below the
    floor (the group is then dropped by dynamic sampling)."""
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("group normalization needs at least 2 rewards")
    std = r.std()
    if std < STD_FLOOR:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def rloo_advantage(rewards) -> np.ndarray:
    """Leave-one-out baseline: A_i = r_i - mean of the other n-1 rewards,
    evaluated as (n * r_i - sum r) / (n - 1) for one rounding per entry.

    Sums to zero exactly (algebraic identity).
    """
    r = np.asarray(rewards, dtype=float)
    n = r.size
    if n < 2:
        raise ValueError("leave-one-out baseline needs at least 2 rewards")
    return (n * r - r.sum()) / (n - 1)


def dynamic_sampling_filter(groups: Sequence[Group]) -> list[Group]:
    """Drop groups whose rewards are all identical (zero gradient signal);
    order of survivors is preserved."""
    kept = []
    for g in groups:
        if g.rewards is None:
            raise ValueError(f"group {g.problem_id} has no rewards")
        if np.any(g.rewards != g.rewards[0]):
            kept.append(g)
    return kept


def clipped_surrogate(
    groups: Sequence[Group],
    old_logprobs: Sequence[Sequence[np.ndarray]],
    cur_logprobs: Sequence[Sequence[np.ndarray]],
    cfg: SurrogateConfig,
) -> tuple[float, list[list[np.ndarray]]]:
    """Ratio-clipped surrogate over a batch of groups.

    Per token: min(rho * A, clip(rho, 1-eps_low, 1+eps_high) * A) with
    rho = exp(cur - old) and A the trajectory advantage broadcast to its
    tokens. ``sample_avg`` averages per-trajectory token means over the batch;
    ``token_avg`` divides the summed per-token terms by the batch token count.

    Returns (objective value, per-token gradient weights). Weights are zero on
    tokens where the clipped branch is active, matching the exact derivative
    of the min/clip expression.
    """
    if not (len(groups) == len(old_logprobs) == len(cur_logprobs)):
        raise ValueError("groups and log-prob batches are misaligned")
    n_traj = sum(g.size for g in groups)
    if n_traj == 0:
        raise ValueError("empty batch")
    total_tokens = 0
    raw_terms: list[list[np.ndarray]] = []
    raw_weights: list[list[np.ndarray]] = []
    for g, olds, curs in zip(groups, old_logprobs, cur_logprobs):
        if g.advantages is None:
            raise ValueError(f"group {g.problem_id} has no advantages")
        if not (g.size == len(olds) == len(curs)):
            raise ValueError("per-group log-prob lists are misaligned")
        g_terms, g_weights = [], []
        for i, traj in enumerate(g.trajectories):
            old = np.asarray(olds[i], dtype=float)
            cur = np.asarray(curs[i], dtype=float)
            if old.shape != cur.shape or old.shape != traj.rollout_logprobs.shape:
                raise ValueError("log-prob vectors do not match trajectory tokens")
            rho = np.exp(cur - old)
            if not np.all(np.isfinite(rho)):
                bad = np.flatnonzero(~np.isfinite(rho)).tolist()
                raise DivergenceError(
                    step=-1, what=f"non-finite ratio at tokens {bad} of a trajectory"
                )
            a = float(g.advantages[i])
            clipped = np.clip(rho, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high)
            unclipped_term = rho * a
            clipped_term = clipped * a
            term = np.minimum(unclipped_term, clipped_term)
            # Gradient flows only through the rho branch of the min.
            weight = np.where(unclipped_term <= clipped_term, rho * a, 0.0)
            g_terms.append(term)
            g_weights.append(weight)
            total_tokens += term.size
        raw_terms.append(g_terms)
        raw_weights.append(g_weights)

    if cfg.norm_mode == NORM_SAMPLE_AVG:
        value = 0.0
        weights = []
        for g_terms, g_weights in zip(raw_terms, raw_weights):
            g_out = []
            for term, weight in zip(g_terms, g_weights):
                coef = 1.0 / (n_traj * term.size)
                value += coef * term.sum()
                g_out.append(coef * weight)
            weights.append(g_out)
        return float(value), weights
    coef = 1.0 / total_tokens
    value = coef * sum(t.sum() for g_terms in raw_terms for t in g_terms)
    weights = [[coef * w for w in g_weights] for g_weights in raw_weights]
    return float(value), weights


def tis_correct(
    weights: Sequence[Sequence[np.ndarray]],
    old_logprobs: Sequence[Sequence[np.ndarray]],
    rollout_logprobs: Sequence[Sequence[np.ndarray]],
    cap: float = 2.0,
    mode: str = TIS_TOKEN,
) -> list[list[np.ndarray]]:
    """Truncated importance-sampling correction for a rollout/learner gap.

    Multiplies each token weight by min(exp(old - rollout), cap). Identity
    when the rollout policy matches the learner's reference. ``sequence`` mode
    applies one capped whole-sequence ratio to all tokens of the sequence.
    """
    if cap < 1.0:
        raise ValueError("tis cap must be >= 1")
    if mode not in (TIS_TOKEN, TIS_SEQUENCE):
        raise ValueError(f"unknown tis mode {mode!r}")
    out: list[list[np.ndarray]] = []
    for g_w, g_old, g_roll in zip(weights, old_logprobs, rollout_logprobs):
        g_out = []
        for w, old, roll in zip(g_w, g_old, g_roll):
            old = np.asarray(old, dtype=float)
            roll = np.asarray(roll, dtype=float)
            if mode == TIS_TOKEN:
                factor = np.minimum(np.exp(old - roll), cap)
            else:
                factor = min(float(np.exp(old.sum() - roll.sum())), cap)
            g_out.append(w * factor)
        out.append(g_out)
    return out
