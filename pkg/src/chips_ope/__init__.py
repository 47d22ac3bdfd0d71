"""Off-policy evaluation for contextual bandits with context-clustered weights.

The package provides logged-data containers, a synthetic cluster-structured
bandit generator, a mini-batch k-means clusterer, a family of policy-value
estimators (IPS, SNIPS, DM, DR, SNDR, DRoS, SwitchDR, MR, MIPS and the
cluster-huddled CHIPS variants), an exact enumeration oracle for small
discrete instances, and a Monte Carlo experiment harness.
"""

from .core import (
    BanditDataset,
    CapabilityError,
    DataValidationError,
    Estimate,
    PolicyTable,
    RandomStream,
    TablePolicy,
    load_bandit_csv,
    validate_dataset,
    write_bandit_csv,
)
from .clustering import ClusterModel, fit_minibatch_kmeans
from .synthgen import SynthConfig, SyntheticWorld, generate_world, sample_logged_data, true_policy_value
from .estimators import (
    ChipsOptions,
    RewardModel,
    ESTIMATOR_NAMES,
    estimate_chips,
    estimate_dm,
    estimate_dr,
    estimate_ips,
    estimate_mips,
    estimate_mr,
    estimate_snips,
    fit_reward_model,
    run_estimator,
)
from .oracle import DiscreteInstance, EnumerationLimitError

__all__ = [
    "BanditDataset",
    "CapabilityError",
    "ChipsOptions",
    "ClusterModel",
    "DataValidationError",
    "DiscreteInstance",
    "ESTIMATOR_NAMES",
    "EnumerationLimitError",
    "Estimate",
    "PolicyTable",
    "RandomStream",
    "RewardModel",
    "SynthConfig",
    "SyntheticWorld",
    "TablePolicy",
    "estimate_chips",
    "estimate_dm",
    "estimate_dr",
    "estimate_ips",
    "estimate_mips",
    "estimate_mr",
    "estimate_snips",
    "fit_minibatch_kmeans",
    "fit_reward_model",
    "generate_world",
    "load_bandit_csv",
    "run_estimator",
    "sample_logged_data",
    "true_policy_value",
    "validate_dataset",
    "write_bandit_csv",
]

__version__ = "0.1.0"
