"""Training losses: classification risk, reliable transfer, barycenter reconstruction.

Transport plans enter every loss as constants (alternating minimization:
plans are re-solved between gradient steps), so each loss returns its
value together with gradients w.r.t. the feature batches and classifier
parameters.  Parameter-space gradients are assembled by the caller via
the model's backward passes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    AdaptModel,
    GradientBuffer,
    backward_classify,
    backward_features,
    forward_classify,
)
from .ot_solver import TransportPlan, squared_distances


@dataclass(frozen=True)
class LossReport:
    """Per-epoch loss values; total = l_cls + eta1 * l_rt + eta2 * l_br."""

    l_cls: float
    l_rt: float
    l_rt_align: float
    l_rt_sep: float
    l_br: float
    eta1: float
    eta2: float
    total: float


def cross_entropy_grads(probs: np.ndarray, labels: np.ndarray, n_total: int):
    """Mean cross-entropy over ``n_total`` samples and its logit gradient.

    ``labels`` are 1-based.  The gradient is (probs - onehot) / n_total so
    batches can be split across several forward calls and still average
    over the combined count.
    """
    idx = np.asarray(labels) - 1
    if idx.min() < 0 or idx.max() >= probs.shape[1]:
        raise ValueError(
            f"labels must lie in [1..{probs.shape[1]}]"
        )
    rows = np.arange(probs.shape[0])
    picked = np.maximum(probs[rows, idx], 1e-300)
    value = float(-np.log(picked).sum() / n_total)
    d_logits = probs.copy()
    d_logits[rows, idx] -= 1.0
    d_logits /= n_total
    return value, d_logits


def loss_cls(
    model: AdaptModel,
    source_z: np.ndarray,
    source_labels: np.ndarray,
    private_z: np.ndarray | None = None,
    pseudo_label: int | None = None,
):
    """Classification risk over the source set plus identified privates.

    Returns (value, d_source_z, d_private_z, h_grads).  ``private_z`` are
    features of candidates flagged private; they all receive
    ``pseudo_label`` (the K+1 output).  Pass None when the private set is
    empty or lives in the labeled domain.
    """
    n_private = 0 if private_z is None else private_z.shape[0]
    n_total = source_z.shape[0] + n_private
    h_grads = GradientBuffer(model)

    probs_s, cache_s = forward_classify(model, source_z, return_cache=True)
    value, d_logits_s = cross_entropy_grads(probs_s, source_labels, n_total)
    d_source_z = backward_classify(model, cache_s, d_logits_s, h_grads)

    d_private_z = None
    if n_private:
        if pseudo_label is None:
            raise ValueError("a pseudo label is required for private samples")
        probs_p, cache_p = forward_classify(model, private_z, return_cache=True)
        labels_p = np.full(n_private, pseudo_label, dtype=int)
        value_p, d_logits_p = cross_entropy_grads(probs_p, labels_p, n_total)
        value += value_p
        d_private_z = backward_classify(model, cache_p, d_logits_p, h_grads)
    return value, d_source_z, d_private_z, h_grads


def loss_rt(
    source_z: np.ndarray,
    target_z: np.ndarray,
    gamma_shr: TransportPlan,
    gamma_prv: TransportPlan,
):
    """Reliable transfer loss: align shared pairs, separate private pairs.

    Value is <G_shr, C> - <G_prv, C> with C the squared Euclidean distance
    between current features.  Returns (value, align, sep, d_source_z,
    d_target_z).
    """
    g = gamma_shr.gamma - gamma_prv.gamma
    if g.shape != (source_z.shape[0], target_z.shape[0]):
        raise ValueError(
            f"plan shape {g.shape} does not match feature counts "
            f"({source_z.shape[0]}, {target_z.shape[0]})"
        )
    dists = squared_distances(source_z, target_z)
    align = float((gamma_shr.gamma * dists).sum())
    sep = float((gamma_prv.gamma * dists).sum())
    d_source = 2.0 * (g.sum(axis=1)[:, None] * source_z - g @ target_z)
    d_target = 2.0 * (g.sum(axis=0)[:, None] * target_z - g.T @ source_z)
    return align - sep, align, sep, d_source, d_target


def barycenter_map(gamma: np.ndarray, target_z: np.ndarray):
    """Mass-normalized barycentric projection of each plan row.

    Returns (mapped, row_mass, included) where excluded rows (zero mass)
    map to the zero vector.  For rows carrying exactly 1/n mass this is
    the n-scaled weighted sum of target features.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    row_mass = gamma.sum(axis=1)
    included = row_mass > 0.0
    mapped = np.zeros((gamma.shape[0], target_z.shape[1]))
    if included.any():
        mapped[included] = (
            gamma[included] @ target_z / row_mass[included, None]
        )
    return mapped, row_mass, included


def loss_br(
    model: AdaptModel,
    plan: TransportPlan,
    target_z: np.ndarray,
    source_labels: np.ndarray,
):
    """Reconstruction risk at the barycenter-mapped source positions.

    Gradient flows into the classifier and, through the mapped points,
    back into the target features.  Returns (value, d_target_z, h_grads,
    included).
    """
    mapped, row_mass, included = barycenter_map(plan.gamma, target_z)
    h_grads = GradientBuffer(model)
    d_target = np.zeros_like(np.asarray(target_z, dtype=np.float64))
    if not included.any():
        return 0.0, d_target, h_grads, included
    probs, cache = forward_classify(model, mapped[included], return_cache=True)
    labels = np.asarray(source_labels)[included]
    value, d_logits = cross_entropy_grads(probs, labels, int(included.sum()))
    d_mapped = backward_classify(model, cache, d_logits, h_grads)
    weights = plan.gamma[included] / row_mass[included, None]
    d_target += weights.T @ d_mapped
    return value, d_target, h_grads, included


def combine(
    l_cls: float,
    l_rt: float,
    l_rt_align: float,
    l_rt_sep: float,
    l_br: float,
    eta1: float,
    eta2: float,
) -> LossReport:
    """Linear combination of the three losses per the training objective."""
    if eta1 < 0 or eta2 < 0:
        raise ValueError("loss weights must be non-negative")
    total = l_cls + eta1 * l_rt + eta2 * l_br
    return LossReport(l_cls, l_rt, l_rt_align, l_rt_sep, l_br, eta1, eta2, total)


def assemble_gradients(
    model: AdaptModel,
    cache_s,
    cache_t,
    d_source_z: np.ndarray | None,
    d_target_z: np.ndarray | None,
    h_grads: GradientBuffer | None,
) -> GradientBuffer:
    """Map feature-space and classifier gradients to a full parameter buffer."""
    buf = GradientBuffer(model)
    if h_grads is not None:
        buf.add_scaled(h_grads)
    if d_source_z is not None:
        backward_features(model, cache_s, d_source_z, buf)
    if d_target_z is not None:
        backward_features(model, cache_t, d_target_z, buf)
    return buf

