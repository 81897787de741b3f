"""Masked optimal transport for domain adaptation under extreme label shift.

The package identifies private-class samples through the mass a masked
semi-relaxed transport plan assigns them, then trains a small feature
transform and classifier with transfer, classification and barycenter
reconstruction losses.
"""

__version__ = "0.1.0"

from .data_gen import LabeledFeatureSet, SynthSpec, generate, load_features, save_features
from .identification import (
    ClassMassMatrix,
    IdentificationResult,
    ScoreVector,
    class_mass_matrix,
    compute_scores,
    identify,
    nearest_centroid_labels,
    split_plan,
    transpose_plan,
)
from .losses import LossReport, barycenter_map, combine, loss_br, loss_cls, loss_rt
from .metrics import (
    BoundReport,
    EvalReport,
    bound_terms,
    eval_osda,
    eval_pda,
    harmonic_mean,
    ident_metrics,
)
from .model import AdaptModel, GradientBuffer, ModelDims, SgdMomentum
from .ot_solver import (
    CostSpec,
    Histogram,
    InfeasibleRowError,
    TransportPlan,
    brute_force_mot,
    label_mask,
    solve_entropic_ot,
    solve_masked_semirelaxed,
    squared_distances,
    transport_objective,
)
from .trainer import TaskConfig, TrainState, pretrain, train, train_epoch

__all__ = [
    "AdaptModel",
    "BoundReport",
    "ClassMassMatrix",
    "CostSpec",
    "EvalReport",
    "GradientBuffer",
    "Histogram",
    "IdentificationResult",
    "InfeasibleRowError",
    "LabeledFeatureSet",
    "LossReport",
    "ModelDims",
    "ScoreVector",
    "SgdMomentum",
    "SynthSpec",
    "TaskConfig",
    "TrainState",
    "TransportPlan",
    "barycenter_map",
    "bound_terms",
    "brute_force_mot",
    "class_mass_matrix",
    "combine",
    "compute_scores",
    "eval_osda",
    "eval_pda",
    "generate",
    "harmonic_mean",
    "ident_metrics",
    "identify",
    "label_mask",
    "load_features",
    "loss_br",
    "loss_cls",
    "loss_rt",
    "nearest_centroid_labels",
    "pretrain",
    "save_features",
    "solve_entropic_ot",
    "solve_masked_semirelaxed",
    "split_plan",
    "squared_distances",
    "train",
    "train_epoch",
    "transport_objective",
    "transpose_plan",
]
