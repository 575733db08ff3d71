"""Clustered federated-learning simulator.

Trains cohort-specific models for groups of statistically similar clients,
discovered online from the gradients clients already report: per-round
clustering maintains persistent cluster labels, a reward-driven affinity
protocol lets clients find their best-fit cohort, and a resource-aware
criterion decides when and how finely to partition the population.
"""

from .clustering import (
    ClusterState,
    PartitionConfig,
    PartitionDecision,
    RewardLedger,
    assign_round,
    estimate_reduction,
    exploit_reward,
    explore_reward,
    init_prototypes,
    partition_criteria,
    similarity_correlation,
    spawn_rewards,
    update_reward,
)
from .cohorttree import (
    AffinityMessage,
    AffinityRequest,
    AffinityStore,
    CohortId,
    CohortNode,
    CohortTree,
    client_apply_feedback,
    client_select_cohort,
    match_request,
    partition_cohort,
    tree_distance,
)
from .config import ExperimentConfig, load_config, write_config
from .engine import (
    Engine,
    ExperimentResult,
    RoundPlan,
    RoundReport,
    run_experiment,
    run_round,
)
from .errors import CheckpointError, ConfigurationError, TrainingDiverged
from .fltrain import (
    GradientUpdate,
    LdpConfig,
    ModelSpec,
    ModelWeights,
    YogiState,
    apply_ldp,
    evaluate,
    fedavg_aggregate,
    local_train,
    yogi_aggregate,
)
from .metrics import adjusted_rand_index, bias_stats
from .population import (
    ClientProfile,
    LatentCohortSpec,
    Population,
    distribution_distance,
    generate_population,
    heterogeneity_report,
    intra_cohort_heterogeneity,
    sample_available,
)
from .resilience import (
    AnomalyConfig,
    Blacklist,
    Checkpoint,
    FaultPlan,
    checkpoint_cohort,
    corrupt_clients,
    detect_anomalies,
    restore_cohort,
    schedule_affinity_loss,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
