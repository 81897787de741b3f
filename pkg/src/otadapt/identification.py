"""Private-class identification from transport mass.

A candidate sample's score is the gap between the uniform column share 1/m
and the mass its column actually received.  Candidates starved of mass
(score above 1/(2m)) are flagged private, candidates with above-average
mass (score below 0) are flagged shared, and the band in between stays
undecided.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ot_solver import Histogram, TransportPlan, squared_distances

MASS_TOLERANCE = 1e-6


class CalibrationError(ValueError):
    """Scores are only meaningful for plans carrying total mass one."""


@dataclass(frozen=True)
class ScoreVector:
    """Per-candidate identification scores (1/m minus the column mass)."""

    scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "scores", np.asarray(self.scores, dtype=np.float64)
        )

    @property
    def m(self) -> int:
        return self.scores.size

    @property
    def private_threshold(self) -> float:
        return 1.0 / (2.0 * self.m)


@dataclass(frozen=True)
class IdentificationResult:
    """Partition of the candidate set into shared / private / undecided."""

    shared_idx: np.ndarray
    private_idx: np.ndarray
    undecided_idx: np.ndarray
    scores: ScoreVector


@dataclass(frozen=True)
class ClassMassMatrix:
    """Transport mass aggregated over same-labeled rows, one row per class."""

    gamma_prime: np.ndarray
    class_freq: Histogram


def compute_scores(plan: TransportPlan) -> ScoreVector:
    """Score every column of a semi-relaxed plan with total mass one."""
    total = plan.total_mass()
    if abs(total - 1.0) > MASS_TOLERANCE:
        raise CalibrationError(
            f"plan mass {total!r} deviates from 1 by more than {MASS_TOLERANCE}"
        )
    m = plan.shape[1]
    return ScoreVector(1.0 / m - plan.col_sums())


def identify(scores: ScoreVector) -> IdentificationResult:
    """Apply the strict 0 / 1/(2m) thresholds; boundary ties stay undecided."""
    s = scores.scores
    thr = scores.private_threshold
    shared = np.flatnonzero(s < 0.0)
    private = np.flatnonzero(s > thr)
    undecided = np.flatnonzero((s >= 0.0) & (s <= thr))
    return IdentificationResult(shared, private, undecided, scores)


def class_mass_matrix(
    plan: TransportPlan,
    source_labels: np.ndarray,
    n_classes: int | None = None,
) -> ClassMassMatrix:
    """Aggregate plan rows by their class label (labels are 1-based)."""
    labels = np.asarray(source_labels)
    if labels.shape != (plan.shape[0],):
        raise ValueError("need exactly one label per plan row")
    if n_classes is None:
        n_classes = int(labels.max())
    if labels.min() < 1 or labels.max() > n_classes:
        raise ValueError(f"labels must lie in [1..{n_classes}]")
    gamma_prime = np.zeros((n_classes, plan.shape[1]))
    freq = np.zeros(n_classes)
    for k in range(1, n_classes + 1):
        rows = labels == k
        gamma_prime[k - 1] = plan.gamma[rows].sum(axis=0)
        freq[k - 1] = plan.row_marginal.weights[rows].sum()
    return ClassMassMatrix(gamma_prime, Histogram(freq))


def split_plan(
    plan: TransportPlan,
    result: IdentificationResult,
    candidate_side: str,
) -> tuple[TransportPlan, TransportPlan]:
    """Split a plan into its shared-candidate and private-candidate parts.

    ``candidate_side`` names the axis indexing the identification
    candidates: "cols" when candidates were the columns of the solve (open
    set), "rows" after the partial-scenario transpose.  Undecided
    candidates appear in neither part.
    """
    if candidate_side not in ("rows", "cols"):
        raise ValueError("candidate_side must be 'rows' or 'cols'")
    axis_len = plan.shape[0] if candidate_side == "rows" else plan.shape[1]
    shared_sel = np.zeros(axis_len, dtype=bool)
    shared_sel[result.shared_idx] = True
    private_sel = np.zeros(axis_len, dtype=bool)
    private_sel[result.private_idx] = True

    def keep(selector):
        gamma = np.zeros_like(plan.gamma)
        if candidate_side == "rows":
            gamma[selector, :] = plan.gamma[selector, :]
        else:
            gamma[:, selector] = plan.gamma[:, selector]
        return TransportPlan(
            gamma,
            plan.row_marginal,
            plan.col_marginal_target,
            plan.converged,
            plan.iterations,
            plan.lam,
            plan.beta2,
            plan.cost_scale,
        )

    return keep(shared_sel), keep(private_sel)


def transpose_plan(plan: TransportPlan) -> TransportPlan:
    """Flip a plan's direction; the marginals become the observed sums."""
    return TransportPlan(
        plan.gamma.T.copy(),
        Histogram(plan.col_sums()),
        Histogram(plan.row_sums()),
        plan.converged,
        plan.iterations,
        plan.lam,
        plan.beta2,
        plan.cost_scale,
    )


def nearest_centroid_labels(
    ref_feats: np.ndarray,
    ref_labels: np.ndarray,
    query_feats: np.ndarray,
) -> np.ndarray:
    """Label each query point with the class of its nearest reference centroid."""
    ref_labels = np.asarray(ref_labels)
    classes = np.unique(ref_labels)
    centroids = np.stack(
        [np.asarray(ref_feats)[ref_labels == c].mean(axis=0) for c in classes]
    )
    nearest = np.argmin(squared_distances(query_feats, centroids), axis=1)
    return classes[nearest]
