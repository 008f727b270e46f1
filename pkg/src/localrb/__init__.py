"""Locally adaptive reduced bases with a learned anisotropic parameter metric."""
from .metric import (
    MetricField,
    ParameterDomain,
    distance,
    estimate_hessian,
    metric_at,
    metric_from_hessian,
)
from .ortho import compute_beta, compute_gamma, orthonormalize
from .training import TrainingSet, generate_training_set
from .greedy import (
    OfflineConfig,
    classical_greedy,
    domain_of_influence_excludes,
    enrichment_loop,
    local_sample_set,
    offline_drive,
    q_of_err,
)
from .online import assemble_reduced, online_solve, OnlineModel
from .store import OfflineBundle, load_bundle, save_bundle

__version__ = "0.1.0"
