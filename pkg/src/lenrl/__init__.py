"""Desk-scale lab for length-controlled policy-gradient training.

Small analytically-differentiable policies are trained with group-relative
objectives on synthetic verifiable-reasoning tasks, instrumented to expose
how response length trades off against accuracy: too short and the answer
distribution is centred off target, too long and it disperses.
"""

from .config import TrainConfig, dump_config, load_config, parse_config, set_key
from .envs import (
    EnvConfig,
    Problem,
    Verdict,
    make_problem,
    oracle_accuracy,
    oracle_dispersion,
    verify,
)
from .errors import ConfigError, DivergenceError
from .metrics import (
    AnswerHistogram,
    DispersionReport,
    answer_entropy,
    cv_decomposition,
    length_bias,
    mode_accuracy,
    mode_share,
    paired_truncation,
    prob_gap,
    truncation_rate,
)
from .objectives import (
    Group,
    SurrogateConfig,
    clipped_surrogate,
    dynamic_sampling_filter,
    group_norm_advantage,
    rloo_advantage,
    tis_correct,
)
from .policy import (
    OptimizerState,
    ParamLayout,
    PolicyParams,
    RngStream,
    Trajectory,
    apply_update,
    grad_weighted_logprob,
    init_params,
    sample_group,
    sequence_logprobs,
)
from .runio import RunManifest, execute_run, export_frontier, sweep
from .shaping import (
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
from .trainer import EvalResult, StepRecord, TrainState, evaluate, init_state, train_step

__version__ = "0.1.0"
