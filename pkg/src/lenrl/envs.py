"""Synthetic verifiable-reasoning environments with closed-form oracles.

Two task families share one trajectory interface:

* Gaussian walk: the latent answer is y = mu0 + sum_t(drift_t + noise_t) over
  the think phase. Correct iff |y - mu_r| <= delta. Stopping early leaves the
  answer centred off target (under-thinking); every extra step adds variance,
  so long walks disperse the answer distribution instead.
* Arithmetic chain: a fixed op list over Z_M. Each think step applies the next
  op to an accumulator; steps past the end of the list corrupt it with
  probability p_corrupt, so stopping exactly on time is optimal.

Environment randomness is drawn during sampling and stored on the trajectory,
so verification replays it exactly and is a pure function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import metrics
from .errors import EnvironmentMismatch

if TYPE_CHECKING:
    from .policy import Trajectory

GAUSSIAN_WALK = "gaussian_walk"
ARITHMETIC_CHAIN = "arithmetic_chain"

REWARD_BINARY = "binary"
REWARD_GAUSSIAN = "gaussian"

# Stream tag separating problem generation from sampling streams.
PROBLEM_TAG = 2


@dataclass(frozen=True)
class GaussianWalkTask:
    mu0: float
    mu_r: float
    delta: float
    sigma_step: float
    bin_width: float
    drift_values: tuple[float, ...]

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be > 0")
        if self.sigma_step < 0:
            raise ValueError("sigma_step must be >= 0")
        if self.bin_width <= 0:
            raise ValueError("bin_width must be > 0")
        if len(self.drift_values) < 1:
            raise ValueError("need at least one drift value")


@dataclass(frozen=True)
class ArithmeticChainTask:
    ops: tuple[tuple[str, int], ...]  # ("add" | "mul", operand)
    modulus: int
    p_corrupt: float

    def __post_init__(self):
        if self.modulus < 2:
            raise ValueError("modulus must be >= 2")
        if not 0.0 <= self.p_corrupt <= 1.0:
            raise ValueError("p_corrupt must be in [0, 1]")
        for op, _ in self.ops:
            if op not in ("add", "mul"):
                raise ValueError(f"unknown op {op!r}")

    def chain_value(self, n_steps: int | None = None) -> int:
        """Accumulator after the first n_steps ops (all by default)."""
        upto = len(self.ops) if n_steps is None else min(n_steps, len(self.ops))
        acc = 0
        for op, operand in self.ops[:upto]:
            acc = (acc + operand) % self.modulus if op == "add" else (acc * operand) % self.modulus
        return acc


@dataclass(frozen=True)
class Problem:
    id: str
    kind: str
    gw: GaussianWalkTask | None = None
    ac: ArithmeticChainTask | None = None

    def __post_init__(self):
        if self.kind == GAUSSIAN_WALK and self.gw is None:
            raise ValueError("gaussian_walk problem needs gw task parameters")
        if self.kind == ARITHMETIC_CHAIN and self.ac is None:
            raise ValueError("arithmetic_chain problem needs ac task parameters")

    @property
    def n_drift(self) -> int:
        # The chain has no drift choice; a single dummy drift keeps the token
        # alphabet uniform across environments.
        return len(self.gw.drift_values) if self.kind == GAUSSIAN_WALK else 1

    @property
    def answer_vocab(self) -> int:
        # The walk's answer is derived from the think phase, so its answer
        # token is a deterministic single-symbol emission.
        return 1 if self.kind == GAUSSIAN_WALK else self.ac.modulus

    def truth_bucket(self) -> int:
        if self.kind == GAUSSIAN_WALK:
            return int(math.floor(self.gw.mu_r / self.gw.bin_width))
        return self.ac.chain_value()


@dataclass(frozen=True)
class Verdict:
    correct: bool
    answer_bucket: int


@dataclass(frozen=True)
class EnvConfig:
    """Environment parameters as they appear in a run config."""

    kind: str = GAUSSIAN_WALK
    reward: str = REWARD_BINARY
    gw_mu0: float = 0.0
    gw_mu_r: float = 10.0
    gw_mu_r_jitter: float = 0.0
    gw_delta: float = 2.0
    gw_sigma_step: float = 1.0
    gw_bin_width: float | None = None  # None resolves to delta
    gw_drift_values: tuple[float, ...] = (0.0, 0.5, 1.0, 1.5, 2.0)
    gw_target_drift: float = 1.0
    ac_modulus: int = 10
    ac_min_ops: int = 4
    ac_max_ops: int = 12
    ac_p_corrupt: float = 0.1


def make_problem(cfg: EnvConfig, index: int, seed: int) -> Problem:
    """Deterministically generate problem #index for a run seed."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, PROBLEM_TAG, index)))
    if cfg.kind == GAUSSIAN_WALK:
        mu_r = cfg.gw_mu_r
        if cfg.gw_mu_r_jitter > 0:
            mu_r = mu_r + cfg.gw_mu_r_jitter * (2.0 * rng.random() - 1.0)
        task = GaussianWalkTask(
            mu0=cfg.gw_mu0,
            mu_r=mu_r,
            delta=cfg.gw_delta,
            sigma_step=cfg.gw_sigma_step,
            bin_width=cfg.gw_bin_width if cfg.gw_bin_width is not None else cfg.gw_delta,
            drift_values=tuple(cfg.gw_drift_values),
        )
        return Problem(id=f"gw-{index}", kind=GAUSSIAN_WALK, gw=task)
    if cfg.kind == ARITHMETIC_CHAIN:
        n_ops = int(rng.integers(cfg.ac_min_ops, cfg.ac_max_ops + 1))
        ops = tuple(
            (("add", "mul")[int(rng.integers(2))], int(rng.integers(1, cfg.ac_modulus)))
            for _ in range(n_ops)
        )
        task = ArithmeticChainTask(ops=ops, modulus=cfg.ac_modulus, p_corrupt=cfg.ac_p_corrupt)
        return Problem(id=f"ac-{index}", kind=ARITHMETIC_CHAIN, ac=task)
    raise ValueError(f"unknown environment kind {cfg.kind!r}")


def step_noise(problem: Problem, t: int, rng: np.random.Generator) -> tuple[float, ...]:
    """Environment noise for one think step, recorded on the trajectory.

    Gaussian walk: one N(0, sigma_step^2) increment. Arithmetic chain: a
    (uniform, replacement-value) pair consulted only on steps past the op list.
    """
    if problem.kind == GAUSSIAN_WALK:
        return (rng.normal(0.0, problem.gw.sigma_step),)
    return (rng.random(), float(rng.integers(problem.ac.modulus)))


def _walk_value(problem: Problem, drift_indices: np.ndarray, env_noise: np.ndarray) -> float:
    vals = np.asarray(problem.gw.drift_values, dtype=float)
    drift_sum = vals[drift_indices].sum() if drift_indices.size else 0.0
    noise_sum = env_noise[:, 0].sum() if env_noise.size else 0.0
    return float(problem.gw.mu0 + drift_sum + noise_sum)


def _chain_answer(problem: Problem, n_steps: int, env_noise: np.ndarray) -> int:
    task = problem.ac
    acc = task.chain_value(n_steps)
    for t in range(len(task.ops), n_steps):
        u, v = env_noise[t]
        if u < task.p_corrupt:
            acc = int(v)
    return acc


def extract_answer(
    problem: Problem, drift_indices: np.ndarray, env_noise: np.ndarray
) -> int:
    """The discrete answer the environment reads off a think phase."""
    if problem.kind == GAUSSIAN_WALK:
        y = _walk_value(problem, drift_indices, env_noise)
        return int(math.floor(y / problem.gw.bin_width))
    return _chain_answer(problem, len(drift_indices), env_noise)


def verify(traj: "Trajectory", problem: Problem) -> Verdict:
    """Recompute the answer from the recorded think phase and judge it.

    Pure: replays the stored environment noise, so repeated calls agree.
    """
    if traj.problem_id and traj.problem_id != problem.id:
        raise EnvironmentMismatch(
            f"trajectory from {traj.problem_id!r} verified against {problem.id!r}"
        )
    drift_indices = traj.tokens[traj.tokens < problem.n_drift]
    if drift_indices.size != traj.length:
        raise EnvironmentMismatch("trajectory think phase does not match environment vocabulary")
    if problem.kind == GAUSSIAN_WALK:
        y = _walk_value(problem, drift_indices, traj.env_noise)
        correct = abs(y - problem.gw.mu_r) <= problem.gw.delta
        return Verdict(correct=bool(correct), answer_bucket=int(math.floor(y / problem.gw.bin_width)))
    answer = _chain_answer(problem, traj.length, traj.env_noise)
    return Verdict(correct=answer == problem.ac.chain_value(), answer_bucket=answer)


def reward_value(traj: "Trajectory", problem: Problem, verdict: Verdict, mode: str) -> float:
    """Base (unshaped) reward. Binary correctness by default; the optional
    Gaussian mode scores the walk's landing point with a bell curve of width
    delta around the target (no equivalence with the binary rule is claimed)."""
    if mode == REWARD_BINARY:
        return float(verdict.correct)
    if mode == REWARD_GAUSSIAN:
        if problem.kind != GAUSSIAN_WALK:
            raise ValueError("gaussian reward mode applies to the gaussian walk only")
        drift_indices = traj.tokens[traj.tokens < problem.n_drift]
        y = _walk_value(problem, drift_indices, traj.env_noise)
        z = (y - problem.gw.mu_r) / problem.gw.delta
        return float(math.exp(-0.5 * z * z))
    raise ValueError(f"unknown reward mode {mode!r}")


def normal_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _walk_moments(
    problem: Problem, drift_mean: float, drift_var: float, length: int
) -> tuple[float, float]:
    if problem.kind != GAUSSIAN_WALK:
        raise ValueError("oracle applies to gaussian_walk problems only")
    if length < 0:
        raise ValueError("length must be >= 0")
    if drift_var < 0:
        raise ValueError("drift_var must be >= 0")
    gw = problem.gw
    m = gw.mu0 + length * drift_mean
    s2 = length * (drift_var + gw.sigma_step**2)
    return m, s2


def oracle_accuracy(
    problem: Problem, drift_mean: float, drift_var: float, length: int
) -> float:
    """Closed-form hit probability of an L-step walk with the given per-step
    drift moments: Phi((mu_r+d-m)/s) - Phi((mu_r-d-m)/s) with m = mu0 + L*mean
    and s^2 = L*(drift_var + sigma_step^2). Degenerate s collapses to the
    indicator of the tolerance band."""
    gw = problem.gw if problem.kind == GAUSSIAN_WALK else None
    m, s2 = _walk_moments(problem, drift_mean, drift_var, length)
    if s2 == 0.0:
        return float(abs(m - gw.mu_r) <= gw.delta)
    s = math.sqrt(s2)
    hi = (gw.mu_r + gw.delta - m) / s
    lo = (gw.mu_r - gw.delta - m) / s
    return normal_cdf(hi) - normal_cdf(lo)


def simulate_walk(
    problem: Problem,
    drift_mean: float,
    drift_var: float,
    length: int,
    n_samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Monte-Carlo landing points of the modeled walk: per-step Gaussian
    drifts plus per-step environment noise, summed step by step. Serves as the
    sampling-based cross-check of the closed-form oracle."""
    _walk_moments(problem, drift_mean, drift_var, length)  # validation
    gw = problem.gw
    y = np.full(n_samples, gw.mu0, dtype=float)
    if length > 0:
        drifts = rng.normal(drift_mean, math.sqrt(drift_var), size=(n_samples, length))
        noise = rng.normal(0.0, gw.sigma_step, size=(n_samples, length))
        y += drifts.sum(axis=1) + noise.sum(axis=1)
    return y


def simulate_walk_accuracy(
    problem: Problem,
    drift_mean: float,
    drift_var: float,
    length: int,
    n_samples: int,
    rng: np.random.Generator,
) -> float:
    y = simulate_walk(problem, drift_mean, drift_var, length, n_samples, rng)
    gw = problem.gw
    return float(np.mean(np.abs(y - gw.mu_r) <= gw.delta))


def oracle_dispersion(
    problem: Problem,
    drift_mean: float,
    drift_var: float,
    length: int,
    n_samples: int,
    rng: np.random.Generator,
) -> metrics.DispersionPoint:
    """Monte-Carlo dispersion triple (mode accuracy, answer entropy, mode
    share) of the bucketed walk answers at a fixed length."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    y = simulate_walk(problem, drift_mean, drift_var, length, n_samples, rng)
    buckets = np.floor(y / problem.gw.bin_width).astype(np.int64)
    hist = metrics.AnswerHistogram.from_answers(buckets, problem.truth_bucket())
    return metrics.dispersion_point(hist)
