"""Temporally weighted contrastive RL on small oracle-checked MDPs."""

from .errors import (
    CrlError,
    ValidationError,
    CorpusError,
    MaskStructureError,
    ShardPlanError,
    NumericalAbort,
    OracleConvergenceError,
)
from .testbed import (
    Mdp,
    MdpFamily,
    GoalSpec,
    Trajectory,
    Corpus,
    CorpusConfig,
    OccupancyOracle,
    chain_mdp,
    grid_mdp,
    random_dag_mdp,
    expert_policy,
    expert_rollout,
    generate_corpus,
    goal_reaching_reward,
    occupancy_oracle,
    monte_carlo_occupancy,
    split_corpus,
)
from .objectives import (
    BatchSample,
    NormalizationMode,
    TemporalWeightTable,
    SimilarityMatrix,
    CrlLoss,
    temporal_weights,
    loss_sa_to_l,
    loss_l_to_sa,
    combined_crl_loss,
    bc_token_loss,
    compute_similarity,
    similarity_backward,
)
from .encoders import (
    EncoderParams,
    TrainConfig,
    TrainResult,
    StepRecord,
    encode_sa,
    encode_goal,
    train,
)
from .gradcheck import GradCheckReport, gradient_check, finite_diff_check
from .masking import (
    TokenRole,
    TokenSample,
    PackedSequence,
    RoleMask,
    BlockLayout,
    IsolationReport,
    TimingRecord,
    BenchConfig,
    pack,
    build_mask,
    dense_attention,
    block_sparse_attention,
    isolation_check,
    mask_bench,
)
from .flow_expert import (
    ActionChunk,
    FlowState,
    FlowHead,
    FlowConfig,
    interpolate,
    fm_loss,
    sample,
    train_flow,
)
from .sharding import ShardPlan, ShardedGradient, sharded_crl_grad, shard_report
from .verify import VerifyConfig, SuiteResult, AblationResult, run_suites, value_curve, crl_ablation

__all__ = [
    # Errors
    "CrlError",
    "ValidationError",
    "CorpusError",
    "MaskStructureError",
    "ShardPlanError",
    "NumericalAbort",
    "OracleConvergenceError",
    # Testbed
    "Mdp",
    "MdpFamily",
    "GoalSpec",
    "Trajectory",
    "Corpus",
    "CorpusConfig",
    "OccupancyOracle",
    "chain_mdp",
    "grid_mdp",
    "random_dag_mdp",
    "expert_policy",
    "expert_rollout",
    "generate_corpus",
    "goal_reaching_reward",
    "occupancy_oracle",
    "monte_carlo_occupancy",
    "split_corpus",
    # Objectives
    "BatchSample",
    "NormalizationMode",
    "TemporalWeightTable",
    "SimilarityMatrix",
    "CrlLoss",
    "temporal_weights",
    "loss_sa_to_l",
    "loss_l_to_sa",
    "combined_crl_loss",
    "bc_token_loss",
    "compute_similarity",
    "similarity_backward",
    # Encoders
    "EncoderParams",
    "TrainConfig",
    "TrainResult",
    "StepRecord",
    "encode_sa",
    "encode_goal",
    "train",
    # Gradient checks
    "GradCheckReport",
    "gradient_check",
    "finite_diff_check",
    # Masking
    "TokenRole",
    "TokenSample",
    "PackedSequence",
    "RoleMask",
    "BlockLayout",
    "IsolationReport",
    "TimingRecord",
    "BenchConfig",
    "pack",
    "build_mask",
    "dense_attention",
    "block_sparse_attention",
    "isolation_check",
    "mask_bench",
    # Flow expert
    "ActionChunk",
    "FlowState",
    "FlowHead",
    "FlowConfig",
    "interpolate",
    "fm_loss",
    "sample",
    "train_flow",
    # Sharding
    "ShardPlan",
    "ShardedGradient",
    "sharded_crl_grad",
    "shard_report",
    # Verification
    "VerifyConfig",
    "SuiteResult",
    "run_suites",
    "value_curve",
    "AblationResult",
    "crl_ablation",
]
