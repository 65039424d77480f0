"""moelab: a desk-scale lab for growing mixture-of-experts models mid-run.

Everything is float64 numpy with hand-written backward passes, organized so
that capacity growth (expert replication) is bitwise-analyzable: the grown
model reproduces the source model's behavior up to the documented noise, and
inert zero-extensions reproduce it exactly.
"""

from .errors import (
    ConfigError,
    DegenerateGapError,
    FormatError,
    InvalidInputError,
    InvalidStateError,
    MoelabError,
    NumericError,
)
from .numerics import Rng, derive_seed, grad_check, gram_schmidt, spearman
from .model import (
    Model,
    ModelConfig,
    OptState,
    Schedule,
    adam_step,
    backward,
    balance_update,
    eval_loss,
    flops_per_token,
    forward,
    init_model,
    init_opt,
    route_topk,
    train_steps,
)
from .upcycle import (
    HeuristicSpec,
    NEG_LOGIT,
    ReplicationPlan,
    UtilityScores,
    allocate_uniform,
    allocate_utility,
    canonical_lift,
    expand_opt_state,
    heuristic_expert_init,
    heuristic_router_init,
    sparse_upcycle,
    upcycle,
    utility_scores,
)
from .bound import BoundInputs, bound, lr_sum, term1, term2, weighted_avg_loss
from .harness import (
    Corpus,
    CostReport,
    CostSpec,
    DataSpec,
    ExperimentConfig,
    Phase1,
    RunMetrics,
    SweepRow,
    ThreeWayResult,
    accumulate_utility_grad,
    config_from_dict,
    config_to_dict,
    continue_phase,
    cost,
    efficiency,
    fixed_batch,
    gen_data,
    holdout_windows,
    init_terminal_correlation,
    parse_heuristic,
    pretrain_phase,
    run_fixed,
    run_sparse_arm,
    run_two_phase,
    sample_batch,
    sign_test_p,
    sweep,
    symmetry_trace,
    three_way,
    three_way_cached,
)
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
