"""Shared fixture builders for the test suite."""

import numpy as np

from lenrl import envs
from lenrl.policy import ParamLayout, Trajectory


def walk_problem(drift_values=(0.0, 0.5, 1.0, 1.5, 2.0), sigma_step=1.0, **kw):
    task = dict(mu0=0.0, mu_r=10.0, delta=2.0, sigma_step=sigma_step, bin_width=2.0,
                drift_values=drift_values)
    task.update(kw)
    return envs.Problem(id="gw-0", kind=envs.GAUSSIAN_WALK, gw=envs.GaussianWalkTask(**task))


def chain_problem(ops=(("add", 3), ("mul", 2)), modulus=10, p_corrupt=0.0):
    return envs.Problem(
        id="ac-0",
        kind=envs.ARITHMETIC_CHAIN,
        ac=envs.ArithmeticChainTask(ops=ops, modulus=modulus, p_corrupt=p_corrupt),
    )


def synthetic_traj(layout: ParamLayout, drifts, answer=0, stopped=True):
    """Hand-built trajectory over an arbitrary layout; log-prob and gradient
    code only reads tokens, so no environment is involved."""
    drifts = [int(d) for d in drifts]
    tokens = drifts + ([layout.n_drift] if stopped else []) + [layout.n_drift + 1 + answer]
    return Trajectory(
        tokens=np.asarray(tokens, dtype=np.int64),
        length=len(drifts),
        answer=answer,
        rollout_logprobs=np.zeros(len(tokens)),
        truncated=not stopped,
        env_noise=np.zeros(len(drifts)),
        problem_id="synthetic",
    )
