import numpy as np
import pytest

from otadapt.identification import IdentificationResult, ScoreVector
from otadapt.metrics import (
    SOURCE_PRIVATE,
    TARGET_PRIVATE,
    bound_terms,
    collapse_labels,
    eval_osda,
    eval_pda,
    harmonic_mean,
    ident_metrics,
)


def _result(private_idx, m):
    private_idx = np.asarray(private_idx, dtype=int)
    rest = np.setdiff1d(np.arange(m), private_idx)
    return IdentificationResult(
        rest, private_idx, np.array([], dtype=int), ScoreVector(np.zeros(m))
    )


def test_harmonic_mean_identities():
    assert harmonic_mean(0.934, 0.985) == pytest.approx(0.959, abs=5e-4)
    for x in (0.0, 0.25, 0.8, 1.0):
        assert harmonic_mean(x, x) == pytest.approx(x)
    assert harmonic_mean(0.9, 0.0) == 0.0


def test_eval_osda_basic_fields():
    true = np.array([1, 1, 2, 2, 3, 3])  # classes 1..2 shared, 3 = unknown
    preds = np.array([1, 2, 2, 2, 3, 1])
    report = eval_osda(preds, true, n_shared=2)
    assert report.per_class_acc[1] == 0.5
    assert report.per_class_acc[2] == 1.0
    assert report.per_class_acc[3] == 0.5
    assert report.os_star == pytest.approx(0.75)
    assert report.unk == pytest.approx(0.5)
    assert report.h == pytest.approx(harmonic_mean(0.75, 0.5))
    assert report.acc == pytest.approx(4 / 6)


def test_eval_osda_missing_class_warns_and_excludes():
    true = np.array([1, 1, 3, 3])
    preds = np.array([1, 1, 3, 3])
    with pytest.warns(UserWarning, match="absent"):
        report = eval_osda(preds, true, n_shared=2)
    assert report.os_star == pytest.approx(1.0)


def test_eval_osda_macro_vs_micro_difference():
    # class 1 has many easy samples, class 2 is rare and always wrong
    true = np.array([1] * 9 + [2] + [3])
    preds = np.array([1] * 9 + [1] + [3])
    report = eval_osda(preds, true, n_shared=2)
    assert report.os_star == pytest.approx(0.5)       # macro over classes
    assert report.acc == pytest.approx(10 / 11)        # micro over samples
    assert report.os_star != pytest.approx(report.acc)


def test_eval_pda_accuracy():
    true = np.array([1, 2, 3, 1])
    assert eval_pda(true, true).acc == 1.0
    assert eval_pda(np.array([2, 3, 1, 2]), true).acc == 0.0
    with pytest.raises(ValueError):
        eval_pda(np.array([], dtype=int), np.array([], dtype=int))


def test_ident_metrics_cases():
    true = np.array([1, 1, 2, 5, 5])
    shared = (1, 2)
    ratio, fp = ident_metrics(_result([3, 4], 5), true, shared)
    assert ratio == 1.0 and fp == 0.0

    ratio, fp = ident_metrics(_result([], 5), true, shared)
    assert ratio == 0.0 and fp == 0.0

    ratio, fp = ident_metrics(_result([0, 3], 5), true, shared)
    assert ratio == pytest.approx(0.5)
    assert fp == pytest.approx(1 / 3)

    # no true privates: clean sweep only when nothing is flagged
    all_shared = np.array([1, 2, 1])
    ratio, fp = ident_metrics(_result([], 3), all_shared, shared)
    assert ratio == 1.0 and fp == 0.0
    ratio, fp = ident_metrics(_result([1], 3), all_shared, shared)
    assert ratio == 0.0 and fp == pytest.approx(1 / 3)


def test_collapse_labels_open_set():
    labels = np.array([1, 2, 3, 3])
    collapsed = collapse_labels(labels, (1, 2), (), (3,), unknown_output=3)
    np.testing.assert_array_equal(
        collapsed, [1, 2, TARGET_PRIVATE, TARGET_PRIVATE]
    )


def test_collapse_labels_partial_and_unknown_output():
    labels = np.array([1, 5, 6, 7])  # 5,6 source-private; 7 = untrained output
    collapsed = collapse_labels(labels, (1, 2, 3, 4), (5, 6), (), unknown_output=7)
    np.testing.assert_array_equal(
        collapsed, [1, SOURCE_PRIVATE, SOURCE_PRIVATE, SOURCE_PRIVATE]
    )
    with pytest.raises(ValueError):
        collapse_labels(np.array([9]), (1, 2), (3,), (4,))


def test_bound_zero_for_identical_domains_perfect_predictor():
    labels = np.array([1, 1, 2, 2])
    report = bound_terms(labels, labels, labels, labels, (1, 2))
    assert report.eps_s == 0.0 and report.eps_t == 0.0
    assert report.delta_mpe == 0.0 and report.delta_scg == 0.0
    assert report.label_l1 == 0.0
    assert report.bound_value == 0.0
    assert report.holds


def test_bound_hand_computed_two_class_shift():
    # source: classes 1,2 equally likely, predictor always right on source
    src_labels = np.array([1, 1, 2, 2])
    src_preds = src_labels.copy()
    # target: label shift (3:1) and the predictor errs on one class-2 sample
    tgt_labels = np.array([1, 1, 1, 2])
    tgt_preds = np.array([1, 1, 1, 1])
    report = bound_terms(src_preds, src_labels, tgt_preds, tgt_labels, (1, 2))
    assert report.eps_s == 0.0
    assert report.delta_mpe == 0.0
    assert report.label_l1 == pytest.approx(0.5)
    # D(class1) = |p(Yhat=2|1) - q(Yhat=2|1)| = 0;
    # D(class2) = |p(Yhat=1|2) - q(Yhat=1|2)| = 1, weighted by q(2) = 1/4
    assert report.delta_scg == pytest.approx(0.25)
    assert report.n_labels == 2
    assert report.bound_value == pytest.approx(0.25)
    assert report.eps_t == pytest.approx(0.25)
    assert report.holds


def test_bound_identity_and_private_terms():
    src_labels = np.array([1, 2, SOURCE_PRIVATE, SOURCE_PRIVATE])
    src_preds = np.array([1, 2, SOURCE_PRIVATE, 1])
    tgt_labels = np.array([1, 2, 2, 2])
    tgt_preds = np.array([1, 2, 2, 1])
    report = bound_terms(src_preds, src_labels, tgt_preds, tgt_labels, (1, 2))
    p_prv, q_prv = report.private_terms
    assert p_prv == pytest.approx(0.25)  # one mispredicted source private
    assert q_prv == 0.0
    reassembled = (
        2.0 * report.eps_s
        + report.label_l1 * report.delta_mpe
        + (report.n_labels - 1) * report.delta_scg
        + q_prv
    )
    assert abs(report.bound_value - reassembled) < 1e-10


def test_bound_requires_target_labels():
    with pytest.raises(ValueError, match="ground truth"):
        bound_terms(np.array([1]), np.array([1]), np.array([1]), None, (1,))
