"""Deterministic simulator of contribution-based device selection.

A linear convex model is trained by distributed dual coordinate ascent over
partitioned devices; each round explores a random device subset, estimates
per-device marginal contributions by truncated Monte-Carlo permutation
sampling on a validation coalition game, and aggregates only the updates that
help. Baseline policies (random, greedy, full participation) share the same
exploration randomness so comparisons are paired by construction.
"""

from .config import ConfigError, ExperimentConfig, load_config
from .cost import DeviceProfile, comm_time, compute_time, sample_profiles, schedule_cost
from .data import (
    DataFormatError,
    DeviceDataset,
    SplitDataset,
    build_split,
    generate_synthetic,
    load_idx_split,
    parse_idx,
    partition_non_iid,
    write_idx,
)
from .losses import LOSSES, SmoothedHinge, SquaredLoss, make_loss
from .orchestrator import (
    Experiment,
    ExperimentResult,
    RoundMetrics,
    RunManifest,
    evaluate_global,
    fairness_audit,
    run_experiment,
)
from .selection import (
    KeepRule,
    RoundPlan,
    SelectionPolicy,
    exploit_select,
    explore_select,
    greedy_select,
)
from .solver import (
    GlobalState,
    Hyperparams,
    LocalUpdate,
    apply_dual_update,
    device_update,
    device_update_ovr,
    dual_objective,
    duality_gap,
    local_subproblem_value,
    primal_objective,
)
from .valuation import (
    CoalitionGame,
    ContributionLedger,
    coalition_value,
    exact_shapley,
    tmc_estimate,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "DeviceProfile",
    "comm_time",
    "compute_time",
    "sample_profiles",
    "schedule_cost",
    "DataFormatError",
    "DeviceDataset",
    "SplitDataset",
    "build_split",
    "generate_synthetic",
    "load_idx_split",
    "parse_idx",
    "partition_non_iid",
    "write_idx",
    "LOSSES",
    "SmoothedHinge",
    "SquaredLoss",
    "make_loss",
    "Experiment",
    "ExperimentResult",
    "RoundMetrics",
    "RunManifest",
    "evaluate_global",
    "fairness_audit",
    "run_experiment",
    "KeepRule",
    "RoundPlan",
    "SelectionPolicy",
    "exploit_select",
    "explore_select",
    "greedy_select",
    "GlobalState",
    "Hyperparams",
    "LocalUpdate",
    "apply_dual_update",
    "device_update",
    "device_update_ovr",
    "dual_objective",
    "duality_gap",
    "local_subproblem_value",
    "primal_objective",
    "CoalitionGame",
    "ContributionLedger",
    "coalition_value",
    "exact_shapley",
    "tmc_estimate",
    "__version__",
]
