"""Length-control methods and the online statistics they depend on.

Four mechanisms, selected by ``ShapingConfig.method``:

* ``rloo_lp``: correct responses earn 1 - alpha * sigmoid(z-scored length);
  the per-problem length statistics are estimated online.
* ``alp``: every response pays beta * length * max(acc, 1/G), so easy
  (high-accuracy) problems are penalized harder.
* ``drpo`` / ``disco``: sequence-level objective on average log-likelihood
  scores; correct responses are weighted by exp((1 - len/C)/lambda)
  (``disco`` is the uniform-weight lambda -> inf limit).
* ``gfpo``: keep only the k shortest correct responses of each group before
  advantages are computed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGroup
from .objectives import Group

METHOD_NONE = "none"
METHOD_RLOO_LP = "rloo_lp"
METHOD_ALP = "alp"
METHOD_DRPO = "drpo"
METHOD_DISCO = "disco"
METHOD_GFPO = "gfpo"
METHODS = (METHOD_NONE, METHOD_RLOO_LP, METHOD_ALP, METHOD_DRPO, METHOD_DISCO, METHOD_GFPO)

ACC_EMA = "ema"
ACC_PER_BATCH = "per_batch"

EMA_DECAY = 0.9


@dataclass(frozen=True)
class ShapingConfig:
    """Active length-control method and its hyperparameters."""

    method: str = METHOD_NONE
    max_len: int | None = None  # C; resolved to the generation cap by default
    alpha: float = 0.5
    beta: float = 1e-4
    lam: float = 1.0
    tau: float = 1.0
    k: int = 8
    drop_incorrect: bool = True
    alp_acc_mode: str = ACC_EMA

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown shaping method {self.method!r}")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must be in [0, 1)")
        if self.beta < 0.0:
            raise ValueError("beta must be >= 0")
        if not self.lam > 0.0:
            raise ValueError("lambda must be > 0")
        if not self.tau > 0.0:
            raise ValueError("tau must be > 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_len is not None and self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.alp_acc_mode not in (ACC_EMA, ACC_PER_BATCH):
            raise ValueError(f"unknown alp_acc_mode {self.alp_acc_mode!r}")


class _Ema:
    """Exponential moving average seeded from the first observation."""

    __slots__ = ("count", "mean", "var")

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.var = 0.0

    def update(self, mean: float, var: float = 0.0):
        if self.count == 0:
            self.mean, self.var = mean, var
        else:
            self.mean = EMA_DECAY * self.mean + (1.0 - EMA_DECAY) * mean
            self.var = EMA_DECAY * self.var + (1.0 - EMA_DECAY) * var
        self.count += 1


class LengthStats:
    """Per-problem running mean/std of correct-response lengths.

    A problem's own estimate is trusted after two updates; before that the
    global estimate (pooled over all problems) stands in.
    """

    def __init__(self):
        self._per: dict[str, _Ema] = {}
        self._global = _Ema()

    def observe(self, problem_id: str, correct_lengths) -> None:
        lens = np.asarray(correct_lengths, dtype=float)
        if lens.size == 0:
            return
        mean, var = float(lens.mean()), float(lens.var())
        self._per.setdefault(problem_id, _Ema()).update(mean, var)
        self._global.update(mean, var)

    def update_count(self, problem_id: str) -> int:
        ema = self._per.get(problem_id)
        return ema.count if ema is not None else 0

    def mean_std(self, problem_id: str) -> tuple[float, float]:
        ema = self._per.get(problem_id)
        if ema is None or ema.count < 2:
            ema = self._global
        if ema.count == 0:
            return 0.0, 1.0
        return ema.mean, math.sqrt(max(ema.var, 0.0))


class AccuracyTracker:
    """Per-problem running accuracy estimate in [0, 1]."""

    def __init__(self, group_size: int):
        if group_size < 1:
            raise ValueError("group_size must be >= 1")
        self.group_size = group_size
        self._per: dict[str, _Ema] = {}
        self._global = _Ema()

    def observe(self, problem_id: str, frac_correct: float) -> None:
        if not 0.0 <= frac_correct <= 1.0:
            raise ValueError("accuracy must be in [0, 1]")
        self._per.setdefault(problem_id, _Ema()).update(float(frac_correct))
        self._global.update(float(frac_correct))

    def acc(self, problem_id: str) -> float:
        ema = self._per.get(problem_id)
        if ema is None or ema.count == 0:
            ema = self._global
        return ema.mean if ema.count else 0.0


def logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def rloo_lp_reward(
    correct: bool, length: int, stats: LengthStats, problem_id: str, alpha: float
) -> float:
    """Length-shaped binary reward: incorrect responses score 0, correct ones
    1 - alpha * sigmoid((len - mean) / std) with per-problem length stats.

    The std is clamped to >= 1 token so a degenerate stream cannot blow the
    z-score up. alpha = 0 recovers the plain 0/1 reward exactly.
    """
    if not correct:
        return 0.0
    if alpha == 0.0:
        return 1.0
    mean, std = stats.mean_std(problem_id)
    std = max(std, 1.0)
    return 1.0 - alpha * logistic((length - mean) / std)


def alp_reward(correct: bool, length: int, acc: float, group_size: int, beta: float) -> float:
    """Accuracy-adaptive penalty: 1{correct} - beta * len * max(acc, 1/G).

    The 1/G floor keeps a minimum penalty even at zero accuracy; the penalty
    applies to correct and incorrect responses alike.
    """
    if not 0.0 <= acc <= 1.0:
        raise ValueError("acc must be in [0, 1]")
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    return float(correct) - beta * length * max(acc, 1.0 / group_size)


def drpo_weight(length: int, max_len: int, lam: float) -> float:
    """Sequence weight exp((1 - len/C) / lambda); strictly decreasing in
    length, 1 at len = C, and identically 1 in the lambda -> inf limit."""
    if length < 0:
        raise ValueError("length must be >= 0")
    if length > max_len:
        raise ValueError(f"length {length} exceeds max_len {max_len}")
    return math.exp((1.0 - length / max_len) / lam)


def _logsumexp(x: np.ndarray) -> float:
    m = float(x.max())
    return m + math.log(float(np.exp(x - m).sum()))


def disco_drpo_objective(
    correct_scores, wrong_scores, weights, tau: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Sequence-level objective on average-log-likelihood scores.

    value = sum_i w_i s_i / sum_i w_i  -  tau * log sum_j exp(s_j / tau)
    over the correct set {s_i} and wrong set {s_j}. Returns per-sequence
    gradient weights: w_i / sum w (all positive, summing to 1) for correct
    sequences and -softmax(s_wrong / tau) for wrong ones. Callers divide by
    each sequence's token count before feeding the per-token gradient, since
    scores are per-token averages.
    """
    c = np.asarray(correct_scores, dtype=float)
    w = np.asarray(wrong_scores, dtype=float)
    om = np.asarray(weights, dtype=float)
    if c.size == 0 or w.size == 0:
        raise DegenerateGroup("need at least one correct and one wrong sequence")
    if om.shape != c.shape:
        raise ValueError("weights must align with correct scores")
    if np.any(om <= 0):
        raise ValueError("weights must be positive")
    if not tau > 0:
        raise ValueError("tau must be > 0")
    wn = om / om.sum()
    scaled = w / tau
    lse = _logsumexp(scaled)
    value = float(wn @ c - tau * lse)
    wrong_grad = -np.exp(scaled - lse)
    return value, wn, wrong_grad


def gfpo_filter(group: Group, k: int, drop_incorrect: bool = True) -> Group:
    """Keep the min(k, #correct) shortest correct responses of a group, ties
    broken by sample index; optionally keep the incorrect ones too.

    The returned group's rewards and mask cover only the retained set, so
    downstream advantage estimators see recomputed group statistics.
    Advantages are reset. Note the default variant feeds all-correct retained
    sets to dynamic sampling, which then drops them.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if group.correct_mask is None:
        raise ValueError("group has no verdicts")
    correct_idx = [i for i in range(group.size) if group.correct_mask[i]]
    correct_idx.sort(key=lambda i: (group.trajectories[i].length, i))
    keep = set(correct_idx[:k])
    if not drop_incorrect:
        keep.update(i for i in range(group.size) if not group.correct_mask[i])
    idx = sorted(keep)
    return Group(
        problem_id=group.problem_id,
        trajectories=[group.trajectories[i] for i in idx],
        rewards=None if group.rewards is None else group.rewards[idx],
        advantages=None,
        correct_mask=group.correct_mask[idx],
    )


def update_online_stats(
    stats: LengthStats, tracker: AccuracyTracker, group: Group
) -> tuple[LengthStats, AccuracyTracker]:
    """Fold one verified group into the online estimators (in place).

    Length stats move only when the group has correct responses; the accuracy
    estimate always moves. The first observation for a problem seeds the
    estimate with the group's own statistics.
    """
    if group.correct_mask is None:
        raise ValueError("group has no verdicts")
    lens = np.asarray([t.length for t in group.trajectories], dtype=float)
    stats.observe(group.problem_id, lens[group.correct_mask])
    tracker.observe(group.problem_id, float(np.mean(group.correct_mask)))
    return stats, tracker
