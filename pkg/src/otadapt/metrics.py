"""Evaluation metrics and generalization-bound diagnostics.

OS* is the macro accuracy over shared classes, UNK the accuracy on the
collapsed unknown class, H their harmonic mean.  The bound diagnostics
estimate every term of the target-error decomposition from empirical
confusion tables, so the reported inequality can be checked on any run
with ground truth.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EvalReport:
    """Accuracy metrics; the open-set fields are None for partial tasks."""

    acc: float
    per_class_acc: dict
    os_star: float | None = None
    unk: float | None = None
    h: float | None = None
    ident_ratio: float | None = None
    false_pos_rate: float | None = None


@dataclass(frozen=True)
class BoundReport:
    """Empirical estimates of every term of the target-error bound."""

    eps_s: float
    eps_t: float
    delta_mpe: float
    delta_scg: float
    label_l1: float
    private_terms: tuple  # (p(Yhat != Y, Y = K_s), q(Yhat != Y, Y = K_t))
    n_labels: int
    bound_value: float
    holds: bool


def harmonic_mean(os_star: float, unk: float) -> float:
    """H score; zero when both inputs are zero."""
    if os_star == 0.0 and unk == 0.0:
        return 0.0
    return 2.0 * os_star * unk / (os_star + unk)


def _per_class_accuracy(predictions, true_labels, classes):
    out = {}
    for c in classes:
        sel = true_labels == c
        if not sel.any():
            continue
        out[int(c)] = float((predictions[sel] == c).mean())
    return out


def eval_osda(predictions, true_labels, n_shared: int) -> EvalReport:
    """Open-set metrics; labels 1..n_shared are shared, n_shared+1 is unknown."""
    predictions = np.asarray(predictions, dtype=int)
    true_labels = np.asarray(true_labels, dtype=int)
    if predictions.shape != true_labels.shape or predictions.size == 0:
        raise ValueError("predictions and labels must be equal-length and non-empty")
    classes = np.arange(1, n_shared + 2)
    per_class = _per_class_accuracy(predictions, true_labels, classes)
    missing = [c for c in range(1, n_shared + 1) if c not in per_class]
    if missing:
        warnings.warn(
            f"shared classes {missing} absent from ground truth; "
            "excluded from the macro average",
            stacklevel=2,
        )
    shared_accs = [per_class[c] for c in range(1, n_shared + 1) if c in per_class]
    os_star = float(np.mean(shared_accs)) if shared_accs else float("nan")
    unk = per_class.get(n_shared + 1)
    acc = float((predictions == true_labels).mean())
    h = harmonic_mean(os_star, unk) if unk is not None else None
    return EvalReport(acc, per_class, os_star=os_star, unk=unk, h=h)


def eval_pda(predictions, true_labels) -> EvalReport:
    """Standard target accuracy for partial tasks."""
    predictions = np.asarray(predictions, dtype=int)
    true_labels = np.asarray(true_labels, dtype=int)
    if predictions.size == 0:
        raise ValueError("cannot evaluate an empty prediction set")
    if predictions.shape != true_labels.shape:
        raise ValueError("predictions and labels must have equal length")
    per_class = _per_class_accuracy(
        predictions, true_labels, np.unique(true_labels)
    )
    return EvalReport(float((predictions == true_labels).mean()), per_class)


def ident_metrics(result, true_labels, shared_labels) -> tuple[float, float]:
    """(identification ratio, false-positive rate) for a candidate set.

    Candidates whose true label is outside ``shared_labels`` count as
    private.  With no true privates the ratio is 1.0 if nothing was
    flagged, else 0.0; the two rates use disjoint denominators.
    """
    true_labels = np.asarray(true_labels, dtype=int)
    is_private = ~np.isin(true_labels, np.asarray(list(shared_labels), dtype=int))
    flagged = np.zeros(true_labels.size, dtype=bool)
    flagged[result.private_idx] = True
    n_private = int(is_private.sum())
    n_shared = int((~is_private).sum())
    if n_private:
        ident_ratio = float((flagged & is_private).sum() / n_private)
    else:
        ident_ratio = 1.0 if not flagged.any() else 0.0
    false_pos = float((flagged & ~is_private).sum() / n_shared) if n_shared else 0.0
    return ident_ratio, false_pos


# ---------------------------------------------------------------------------
# Error-bound diagnostics
# ---------------------------------------------------------------------------

SOURCE_PRIVATE = -1  # collapsed source-only classes
TARGET_PRIVATE = -2  # collapsed target-only classes


def collapse_labels(labels, shared_labels, source_private_labels,
                    target_private_labels, unknown_output=None):
    """Map raw labels onto the shared + collapsed-private label universe.

    ``unknown_output`` names the classifier's extra output; predictions of
    it collapse to the private symbol of whichever side has privates.
    """
    labels = np.asarray(labels, dtype=int)
    out = np.array(labels)
    src_prv = np.isin(labels, list(source_private_labels))
    tgt_prv = np.isin(labels, list(target_private_labels))
    out[src_prv] = SOURCE_PRIVATE
    out[tgt_prv] = TARGET_PRIVATE
    if unknown_output is not None:
        unk = labels == unknown_output
        symbol = TARGET_PRIVATE if target_private_labels else SOURCE_PRIVATE
        out[unk] = symbol
    known = set(shared_labels) | {SOURCE_PRIVATE, TARGET_PRIVATE}
    bad = ~np.isin(out, list(known))
    if bad.any():
        raise ValueError(f"labels {sorted(set(labels[bad]))} are outside the "
                         "declared label spaces")
    return out


def bound_terms(
    source_preds,
    source_labels,
    target_preds,
    target_labels,
    shared_labels,
    slack: float = 0.02,
) -> BoundReport:
    """Assemble the empirical target-error bound from confusion tables.

    All inputs must already live in the collapsed label universe (see
    ``collapse_labels``).  Requires target ground truth; this is a
    diagnostic, not a training signal.
    """
    if target_labels is None:
        raise ValueError(
            "bound diagnostics need target ground truth; run without "
            "--bound when labels are unavailable"
        )
    sp = np.asarray(source_preds, dtype=int)
    sl = np.asarray(source_labels, dtype=int)
    tp = np.asarray(target_preds, dtype=int)
    tl = np.asarray(target_labels, dtype=int)
    shared = sorted(int(c) for c in shared_labels)

    eps_s = float((sp != sl).mean())
    eps_t = float((tp != tl).mean())

    # label universe: shared classes plus whichever private symbols occur
    universe = list(shared)
    for symbol in (SOURCE_PRIVATE, TARGET_PRIVATE):
        if (sl == symbol).any() or (tl == symbol).any():
            universe.append(symbol)
    n_labels = len(universe)

    def cond(preds, labels, j):
        sel = labels == j
        if not sel.any():
            return None
        return {i: float((preds[sel] == i).mean()) for i in universe}

    delta_mpe = 0.0
    delta_scg = 0.0
    label_l1 = 0.0
    skipped = []
    for j in shared:
        p_j = float((sl == j).mean())
        q_j = float((tl == j).mean())
        label_l1 += abs(p_j - q_j)
        p_cond = cond(sp, sl, j)
        q_cond = cond(tp, tl, j)
        if p_cond is not None:
            delta_mpe = max(delta_mpe, 1.0 - p_cond[j])
        if p_cond is None or q_cond is None:
            if q_j > 0:
                skipped.append(j)
            continue
        gap = max(
            abs(p_cond[i] - q_cond[i]) for i in universe if i != j
        )
        delta_scg += q_j * gap
    if skipped:
        warnings.warn(
            f"shared classes {skipped} lack support in one domain; their "
            "conditional-gap terms were skipped",
            stacklevel=2,
        )

    p_private = float(((sl == SOURCE_PRIVATE) & (sp != sl)).mean())
    q_private = float(((tl == TARGET_PRIVATE) & (tp != tl)).mean())

    bound_value = (
        2.0 * eps_s
        + label_l1 * delta_mpe
        + (n_labels - 1) * delta_scg
        + q_private
    )
    return BoundReport(
        eps_s=eps_s,
        eps_t=eps_t,
        delta_mpe=delta_mpe,
        delta_scg=delta_scg,
        label_l1=label_l1,
        private_terms=(p_private, q_private),
        n_labels=n_labels,
        bound_value=bound_value,
        holds=eps_t <= bound_value + slack,
    )
