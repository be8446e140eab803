"""Tabular autoregressive policy: sampling, exact log-probs, analytic gradients.

Each pre-answer step factorises into a stop decision (per-step-bucket
Bernoulli hazard) and, conditional on continuing, a drift-token choice from a
per-bucket softmax head. The final answer token comes from a context-free
softmax head. All heads are tabular, so log-probabilities and their gradients
are closed forms and the lab needs no autodiff framework.

Token encoding (ints): 0..D-1 continue-with-drift-index, D stop, D+1..D+A
answer index 0..A-1. A trajectory is CONTINUE* [STOP] ANSWER; the stop token
is absent when the length cap forced termination. ``length`` counts think
(continue) tokens only.

All log quantities are natural logs. Sampling and re-evaluation share the same
probability tables, so ``sequence_logprobs`` under the sampling parameters
reproduces the recorded rollout log-probs bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import envs
from .errors import DivergenceError, InvalidTrajectory
from .objectives import Group

if TYPE_CHECKING:
    from .envs import Problem

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def log_sigmoid(x) -> np.ndarray:
    """log(sigmoid(x)), stable for large |x|."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=float))


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@dataclass(frozen=True)
class ParamLayout:
    """Immutable index map from named parameter blocks to one flat vector.

    Flat order: stop logits (one per bucket), drift logits (bucket-major),
    answer bias. ``bucket_of`` coarsens step positions into buckets.
    """

    n_buckets: int
    n_drift: int
    n_answer: int
    bucket_size: int = 1

    def __post_init__(self):
        if min(self.n_buckets, self.n_drift, self.n_answer, self.bucket_size) < 1:
            raise ValueError("layout dimensions must be >= 1")

    @property
    def size(self) -> int:
        return self.n_buckets * (1 + self.n_drift) + self.n_answer

    def bucket_of(self, t: int) -> int:
        return min(t // self.bucket_size, self.n_buckets - 1)

    @property
    def stop_slice(self) -> slice:
        return slice(0, self.n_buckets)

    @property
    def drift_slice(self) -> slice:
        return slice(self.n_buckets, self.n_buckets * (1 + self.n_drift))

    @property
    def answer_slice(self) -> slice:
        return slice(self.n_buckets * (1 + self.n_drift), self.size)

    @classmethod
    def for_cap(cls, cap: int, n_drift: int, n_answer: int, bucket_size: int = 1) -> "ParamLayout":
        return cls(
            n_buckets=max(1, -(-cap // bucket_size)),
            n_drift=n_drift,
            n_answer=n_answer,
            bucket_size=bucket_size,
        )


@dataclass
class PolicyParams:
    layout: ParamLayout
    stop_logits: np.ndarray  # (B,)
    drift_logits: np.ndarray  # (B, D)
    answer_bias: np.ndarray  # (A,)

    def validate(self):
        lay = self.layout
        if self.stop_logits.shape != (lay.n_buckets,):
            raise ValueError("stop_logits shape does not match layout")
        if self.drift_logits.shape != (lay.n_buckets, lay.n_drift):
            raise ValueError("drift_logits shape does not match layout")
        if self.answer_bias.shape != (lay.n_answer,):
            raise ValueError("answer_bias shape does not match layout")
        for block in (self.stop_logits, self.drift_logits, self.answer_bias):
            if not np.all(np.isfinite(block)):
                raise ValueError("logits must be finite")

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [self.stop_logits, self.drift_logits.ravel(), self.answer_bias]
        )

    @classmethod
    def unflatten(cls, layout: ParamLayout, flat: np.ndarray) -> "PolicyParams":
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (layout.size,):
            raise ValueError(f"flat vector has size {flat.shape}, layout wants {layout.size}")
        return cls(
            layout=layout,
            stop_logits=flat[layout.stop_slice].copy(),
            drift_logits=flat[layout.drift_slice].reshape(layout.n_buckets, layout.n_drift).copy(),
            answer_bias=flat[layout.answer_slice].copy(),
        )

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            self.layout,
            self.stop_logits.copy(),
            self.drift_logits.copy(),
            self.answer_bias.copy(),
        )


@dataclass
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, layout: ParamLayout) -> "OptimizerState":
        return cls(np.zeros(layout.size), np.zeros(layout.size), 0)


@dataclass
class Trajectory:
    """One sampled response: think tokens, optional stop, final answer token.

    ``length`` is the think-phase token count. ``answer`` is the
    environment-extracted answer id (walk bucket / chain accumulator).
    ``env_noise`` holds the per-think-step environment draws so verification
    is an exact replay. ``rollout_logprobs`` has one entry per token,
    recorded under the sampling parameters.
    """

    tokens: np.ndarray
    length: int
    answer: int
    rollout_logprobs: np.ndarray
    truncated: bool
    env_noise: np.ndarray
    problem_id: str = ""

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class RngStream:
    """Deterministic generator factory keyed by an integer tuple.

    Streams address randomness by purpose/step/problem/sample, so results are
    identical no matter how work is split across workers.
    """

    key: tuple[int, ...]

    def child(self, *ids: int) -> "RngStream":
        return RngStream(self.key + tuple(int(i) for i in ids))

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.key))


@dataclass(frozen=True)
class _HeadTables:
    """Per-parameter probability tables shared by sampling and re-evaluation."""

    p_stop: np.ndarray  # (B,)
    log_stop: np.ndarray  # (B,)
    log_cont: np.ndarray  # (B,)
    drift_probs: np.ndarray  # (B, D)
    drift_cum: np.ndarray  # (B, D)
    log_drift: np.ndarray  # (B, D)
    answer_probs: np.ndarray  # (A,)
    answer_cum: np.ndarray  # (A,)
    log_answer: np.ndarray  # (A,)

    @classmethod
    def build(cls, params: PolicyParams, temperature: float = 1.0) -> "_HeadTables":
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        s = params.stop_logits / temperature
        log_stop = log_sigmoid(s)
        log_cont = log_sigmoid(-s)
        log_drift = log_softmax(params.drift_logits / temperature)
        log_answer = log_softmax(params.answer_bias / temperature)
        drift_probs = np.exp(log_drift)
        answer_probs = np.exp(log_answer)
        return cls(
            p_stop=np.exp(log_stop),
            log_stop=log_stop,
            log_cont=log_cont,
            drift_probs=drift_probs,
            drift_cum=np.cumsum(drift_probs, axis=-1),
            log_drift=log_drift,
            answer_probs=answer_probs,
            answer_cum=np.cumsum(answer_probs),
            log_answer=log_answer,
        )


def _pick(cum: np.ndarray, u: float) -> int:
    return min(int(np.searchsorted(cum, u, side="right")), len(cum) - 1)


def _sample_one(
    tables: _HeadTables,
    layout: ParamLayout,
    problem: "Problem",
    cap: int,
    rng: np.random.Generator,
) -> Trajectory:
    tokens: list[int] = []
    logps: list[float] = []
    noise_rows: list[tuple[float, ...]] = []
    drift_indices: list[int] = []
    t = 0
    stopped = False
    while t < cap:
        b = layout.bucket_of(t)
        if rng.random() < tables.p_stop[b]:
            tokens.append(layout.n_drift)
            logps.append(float(tables.log_stop[b]))
            stopped = True
            break
        d = _pick(tables.drift_cum[b], rng.random())
        tokens.append(d)
        drift_indices.append(d)
        logps.append(float(tables.log_cont[b] + tables.log_drift[b, d]))
        noise_rows.append(envs.step_noise(problem, t, rng))
        t += 1
    a = _pick(tables.answer_cum, rng.random())
    tokens.append(layout.n_drift + 1 + a)
    logps.append(float(tables.log_answer[a]))
    env_noise = np.asarray(noise_rows, dtype=float)
    drift_arr = np.asarray(drift_indices, dtype=np.int64)
    return Trajectory(
        tokens=np.asarray(tokens, dtype=np.int64),
        length=t,
        answer=envs.extract_answer(problem, drift_arr, env_noise),
        rollout_logprobs=np.asarray(logps, dtype=float),
        truncated=not stopped,
        env_noise=env_noise,
        problem_id=problem.id,
    )


def sample_group(
    params: PolicyParams,
    problem: "Problem",
    group_size: int,
    cap: int,
    rng_stream: RngStream,
    temperature: float = 1.0,
) -> Group:
    """Sample a group of responses for one problem.

    Each sample draws from its own child stream, so groups can be generated
    concurrently without changing results. Trajectories end with an answer
    token; hitting the cap is a normal, flagged outcome.
    """
    if group_size < 2:
        raise ValueError("group size must be >= 2")
    if cap < 1:
        raise ValueError("cap must be >= 1")
    if params.layout.n_drift != problem.n_drift or params.layout.n_answer != problem.answer_vocab:
        raise ValueError("policy head sizes do not match the environment vocabulary")
    tables = _HeadTables.build(params, temperature)
    trajs = [
        _sample_one(tables, params.layout, problem, cap, rng_stream.child(i).generator())
        for i in range(group_size)
    ]
    return Group(problem_id=problem.id, trajectories=trajs)


def sequence_logprobs(
    params: PolicyParams, traj: Trajectory, temperature: float = 1.0
) -> np.ndarray:
    """Exact per-token log pi(token | prefix) for a recorded trajectory."""
    tables = _HeadTables.build(params, temperature)
    return _logprobs_one(tables, params.layout, traj)


def _logprobs_one(
    tables: _HeadTables, layout: ParamLayout, traj: Trajectory
) -> np.ndarray:
    tokens = traj.tokens
    n = len(tokens)
    if n < 1:
        raise InvalidTrajectory("trajectory has no tokens")
    out = np.empty(n, dtype=float)
    t = 0
    for k, tok in enumerate(tokens):
        tok = int(tok)
        if tok < 0 or tok > layout.n_drift + layout.n_answer:
            raise InvalidTrajectory(f"token {tok} outside vocabulary")
        if tok < layout.n_drift:
            if k >= n - 1:
                raise InvalidTrajectory("trajectory must end with an answer token")
            b = layout.bucket_of(t)
            out[k] = tables.log_cont[b] + tables.log_drift[b, tok]
            t += 1
        elif tok == layout.n_drift:
            if k != n - 2:
                raise InvalidTrajectory("stop token must directly precede the answer token")
            out[k] = tables.log_stop[layout.bucket_of(t)]
        else:
            if k != n - 1:
                raise InvalidTrajectory("answer token must be last")
            out[k] = tables.log_answer[tok - layout.n_drift - 1]
    return out


def grad_weighted_logprob(
    params: PolicyParams,
    trajs: Sequence[Trajectory],
    per_token_weights: Sequence[np.ndarray],
) -> np.ndarray:
    """Gradient of sum_{i,t} w[i][t] * log pi(token_t | prefix) w.r.t. the
    flat parameter vector, with the weights held constant.

    Closed forms: softmax heads d log p(a)/d logit_j = 1{j=a} - p(j); stop
    hazard d log p_stop / d logit = 1 - p_stop and
    d log(1 - p_stop) / d logit = -p_stop. The walk's answer head has a single
    symbol, so its gradient is identically zero. Accumulation runs in
    trajectory order, so the reduction order is fixed and results do not
    depend on how callers split work.
    """
    if len(trajs) != len(per_token_weights):
        raise ValueError("trajectories and weight rows are misaligned")
    lay = params.layout
    tables = _HeadTables.build(params)
    g_stop = np.zeros(lay.n_buckets)
    g_drift = np.zeros((lay.n_buckets, lay.n_drift))
    g_answer = np.zeros(lay.n_answer)
    for traj, w in zip(trajs, per_token_weights):
        w = np.asarray(w, dtype=float)
        if w.shape != (traj.n_tokens,):
            raise ValueError(
                f"weight row of shape {w.shape} does not match {traj.n_tokens} tokens"
            )
        t = 0
        for k, tok in enumerate(traj.tokens):
            tok = int(tok)
            wk = w[k]
            if tok < lay.n_drift:
                if wk != 0.0:
                    b = lay.bucket_of(t)
                    g_stop[b] -= wk * tables.p_stop[b]
                    g_drift[b] -= wk * tables.drift_probs[b]
                    g_drift[b, tok] += wk
                t += 1
            elif tok == lay.n_drift:
                if wk != 0.0:
                    b = lay.bucket_of(t)
                    g_stop[b] += wk * (1.0 - tables.p_stop[b])
            else:
                if wk != 0.0:
                    a = tok - lay.n_drift - 1
                    g_answer -= wk * tables.answer_probs
                    g_answer[a] += wk
    return np.concatenate([g_stop, g_drift.ravel(), g_answer])


def apply_update(
    params: PolicyParams,
    grad: np.ndarray,
    opt: OptimizerState,
    lr: float,
) -> tuple[PolicyParams, OptimizerState]:
    """One Adam ascent step (beta1=0.9, beta2=0.999, eps=1e-8).

    The gradient points up the objective, so parameters move along it.
    Deterministic given inputs; a non-finite gradient raises with the
    optimizer's step index.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != (params.layout.size,):
        raise ValueError("gradient does not match the flat parameter size")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError(step=opt.step_count)
    m = ADAM_BETA1 * opt.first_moment + (1.0 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * opt.second_moment + (1.0 - ADAM_BETA2) * grad * grad
    t = opt.step_count + 1
    m_hat = m / (1.0 - ADAM_BETA1**t)
    v_hat = v / (1.0 - ADAM_BETA2**t)
    with np.errstate(invalid="ignore"):  # non-finite steps are caught below
        flat = params.flatten() + lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    if not np.all(np.isfinite(flat)):
        raise DivergenceError(step=opt.step_count, what="non-finite parameters after update")
    return PolicyParams.unflatten(params.layout, flat), OptimizerState(m, v, t)


INIT_UNIFORM = "uniform"
INIT_NEAR_TARGET = "near_target"


def init_params(
    layout: ParamLayout,
    mode: str = INIT_UNIFORM,
    stop_hazard: float = 0.05,
    drift_bias: float = 3.0,
    target_index: int | None = None,
) -> PolicyParams:
    """Initial parameters: a constant stop hazard per step, and either a
    uniform drift head or one biased toward a target drift token (the
    prior-competence analog of a distilled starting point)."""
    if not 0.0 < stop_hazard < 1.0:
        raise ValueError("stop_hazard must be in (0, 1)")
    stop_logits = np.full(layout.n_buckets, logit(stop_hazard))
    drift_logits = np.zeros((layout.n_buckets, layout.n_drift))
    if mode == INIT_NEAR_TARGET:
        if target_index is None:
            raise ValueError("near_target init needs a target drift index")
        drift_logits[:, target_index] = drift_bias
    elif mode != INIT_UNIFORM:
        raise ValueError(f"unknown init mode {mode!r}")
    return PolicyParams(
        layout=layout,
        stop_logits=stop_logits,
        drift_logits=drift_logits,
        answer_bias=np.zeros(layout.n_answer),
    )
