"""Diagnostics over sampled answer distributions and response lengths.

The dispersion battery splits failure into two parts: where the answer
distribution is centred (mode accuracy) and how spread out it is (answer
entropy, mode share). Run-level diagnostics add length bias, the
within/between-problem decomposition of the length coefficient of variation,
truncation rates, and the rollout-vs-learner probability gap.

Column names here are the contract for the metrics CSV written by a run.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

# Fixed CSV column identifiers, in file order.
METRIC_COLUMNS = (
    "mode_accuracy",
    "answer_entropy_nats",
    "mode_share",
    "length_bias",
    "cv_overall",
    "cv_within",
    "cv_between",
    "truncation_rate",
    "prob_gap",
)


@dataclass(frozen=True)
class AnswerHistogram:
    """Counts of sampled answers for one problem plus its ground-truth bucket."""

    counts: dict[int, int]
    n: int
    truth: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("histogram needs at least one sample")
        if sum(self.counts.values()) != self.n:
            raise ValueError("histogram counts do not sum to n")

    @classmethod
    def from_answers(cls, answers: Iterable[int], truth: int) -> "AnswerHistogram":
        counts = Counter(int(a) for a in answers)
        return cls(counts=dict(counts), n=sum(counts.values()), truth=int(truth))


@dataclass(frozen=True)
class DispersionPoint:
    """Per-problem dispersion triple."""

    mode_accuracy: int
    answer_entropy_nats: float
    mode_share: float


@dataclass
class DispersionReport:
    """Run-level diagnostics; per-problem values are averaged with equal weight.

    Fields that are undefined for a given run (e.g. length bias when every
    response was correct) are None and serialize as empty CSV fields.
    """

    mode_accuracy: float
    answer_entropy_nats: float
    mode_share: float
    length_bias: float | None
    cv_overall: float | None
    cv_within: float | None
    cv_between: float | None
    truncation_rate: float
    prob_gap: float

    def as_dict(self) -> dict[str, float | None]:
        return {name: getattr(self, name) for name in METRIC_COLUMNS}


def mode_accuracy(h: AnswerHistogram) -> int:
    """1 iff a modal bucket equals the ground truth.

    Ties count as a hit when the truth is among the maximal buckets.
    """
    top = max(h.counts.values())
    return int(h.counts.get(h.truth, 0) == top)


def answer_entropy(h: AnswerHistogram) -> float:
    """Shannon entropy of the empirical answer distribution, in nats."""
    return float(-sum((c / h.n) * math.log(c / h.n) for c in h.counts.values()))


def mode_share(h: AnswerHistogram) -> float:
    """Fraction of samples on the (a) most frequent answer."""
    return max(h.counts.values()) / h.n


def dispersion_point(h: AnswerHistogram) -> DispersionPoint:
    return DispersionPoint(mode_accuracy(h), answer_entropy(h), mode_share(h))


def length_bias(
    correct_lens: Sequence[float], incorrect_lens: Sequence[float]
) -> float | None:
    """(mean correct length - mean incorrect length) / overall mean length.

    Negative values mean incorrect responses run longer. Returns None (an
    explicit undefined marker, not 0) when one side is empty.
    """
    c = np.asarray(correct_lens, dtype=float)
    w = np.asarray(incorrect_lens, dtype=float)
    if c.size == 0 and w.size == 0:
        raise ValueError("length_bias needs at least one response")
    if c.size == 0 or w.size == 0:
        return None
    overall = np.concatenate([c, w]).mean()
    if overall == 0:
        raise ValueError("length_bias undefined for zero overall mean length")
    return float((c.mean() - w.mean()) / overall)


def cv_decomposition(
    groups: Sequence[Sequence[float]],
) -> tuple[float, float, float]:
    """Coefficient-of-variation decomposition of lengths grouped by problem.

    Returns (overall, within, between):
      overall = std(all lengths) / mean(all lengths)
      within  = mean over problems of std_p / mean_p
      between = std(per-problem means) / mean(per-problem means)
    Population variance convention throughout.
    """
    if len(groups) < 2:
        raise ValueError("cv_decomposition needs at least 2 problems")
    arrays = [np.asarray(g, dtype=float) for g in groups]
    if any(a.size < 2 for a in arrays):
        raise ValueError("cv_decomposition needs at least 2 samples per problem")
    pooled = np.concatenate(arrays)
    means = np.array([a.mean() for a in arrays])
    if pooled.mean() == 0 or np.any(means == 0) or means.mean() == 0:
        raise ValueError("cv_decomposition undefined for zero mean lengths")
    overall = pooled.std() / pooled.mean()
    within = float(np.mean([a.std() / a.mean() for a in arrays]))
    between = means.std() / means.mean()
    return float(overall), within, float(between)


def _lengths(trajs: Iterable) -> np.ndarray:
    return np.asarray([getattr(t, "length", t) for t in trajs], dtype=float)


def truncation_rate(trajs: Iterable, cap: float) -> float:
    """Fraction of responses whose length reached the cap."""
    if cap <= 0:
        raise ValueError("cap must be positive")
    lens = _lengths(trajs)
    if lens.size == 0:
        return 0.0
    return float(np.mean(lens >= cap))


def paired_truncation(trajs: Iterable, cap1: float, cap2: float) -> tuple[float, float]:
    """Truncation rate of one sampled population evaluated at two caps.

    The population should be sampled at (or above) the larger cap so the
    smaller-cap rate counts every response the smaller cap would have cut.
    """
    if not cap1 < cap2:
        raise ValueError("cap1 must be < cap2")
    lens = _lengths(trajs)
    if lens.size == 0:
        return 0.0, 0.0
    return float(np.mean(lens >= cap1)), float(np.mean(lens >= cap2))


def prob_gap(rollout_logprobs, current_logprobs) -> float:
    """Mean absolute difference between rollout-time and current per-token
    probabilities. Zero iff the two policies assign identical probabilities."""
    r = np.asarray(rollout_logprobs, dtype=float)
    c = np.asarray(current_logprobs, dtype=float)
    if r.shape != c.shape:
        raise ValueError("rollout/current log-prob vectors are misaligned")
    if r.size == 0:
        return 0.0
    return float(np.mean(np.abs(np.exp(r) - np.exp(c))))
