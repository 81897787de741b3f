import numpy as np
import pytest

from otadapt import SynthSpec, generate, load_features, save_features
from otadapt.data_gen import (
    FeatureFileError,
    LabeledFeatureSet,
    geometry_certificate,
    save_certificate,
)
from otadapt.model import AdaptModel, ModelDims, predict_labels
from otadapt.trainer import TaskConfig, pretrain


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(K_shared=1)
    with pytest.raises(ValueError):
        SynthSpec(n_per_class=2)
    with pytest.raises(ValueError):
        SynthSpec(private_placement="inside")
    with pytest.raises(ValueError, match="d >= 8"):
        SynthSpec(d=4, private_placement="near_other_shared")


def test_generate_shapes_and_label_ranges():
    spec = SynthSpec(seed=0)
    source, target = generate(spec, "osda")
    assert source.n == 4 * 50 and target.n == 6 * 50
    assert source.true_labels.max() == 4  # no private labels in the source
    assert set(np.unique(target.true_labels)) == {1, 2, 3, 4, 5}

    source, target = generate(spec, "pda")
    assert source.n == 6 * 50 and target.n == 4 * 50
    assert set(np.unique(source.true_labels)) == {1, 2, 3, 4, 5, 6}
    assert target.true_labels.max() == 4  # no source-private labels in target


def test_generate_is_deterministic():
    a_src, a_tgt = generate(SynthSpec(seed=11), "osda")
    b_src, b_tgt = generate(SynthSpec(seed=11), "osda")
    np.testing.assert_array_equal(a_src.features, b_src.features)
    np.testing.assert_array_equal(a_tgt.features, b_tgt.features)
    np.testing.assert_array_equal(a_tgt.true_labels, b_tgt.true_labels)


def test_no_shift_no_private_trains_to_high_accuracy():
    spec = SynthSpec(seed=3, K_private=0, domain_shift=0.0)
    source, target = generate(spec, "osda")
    cfg = TaskConfig(
        scenario="osda", n_source_classes=4, n_shared_classes=4,
        seed=3, pretrain_epochs=200,
    )
    model = AdaptModel(ModelDims(source.dim, 64, 16, 5), seed=3)
    pretrain(model, source, cfg)
    preds = predict_labels(model, target.features)
    assert (preds == target.true_labels).mean() >= 0.99


def test_certificate_near_placement_witnesses():
    spec = SynthSpec(seed=7)
    source, target = generate(spec, "osda")
    cert = geometry_certificate(source, target, spec, "osda")
    assert cert["holds"]
    assert len(cert["private_gaps"]) == 2
    diameters = cert["within_diameters"]
    for gap in cert["private_gaps"]:
        assert gap > 3.0 * spec.within_sigma
        assert any(diam > gap for diam in diameters.values())
    margins = cert["local_structure_log_margins"]
    assert all(m is None or m > 0 for m in margins.values())


def test_far_placement_keeps_private_clusters_away():
    spec = SynthSpec(seed=4, private_placement="far")
    source, target = generate(spec, "osda")
    cert = geometry_certificate(source, target, spec, "osda")
    assert cert["holds"]
    assert all(gap > 10.0 * spec.within_sigma for gap in cert["private_gaps"])


def test_certificate_detects_planted_violation():
    spec = SynthSpec(seed=7)
    source, target = generate(spec, "osda")
    # plant the private clusters on top of shared class 1 in the target
    feats = target.features.copy()
    prv = target.true_labels == 5
    shared1 = target.features[target.true_labels == 1]
    feats[prv] = shared1.mean(axis=0) + 0.01 * feats[prv] * 0
    bad = LabeledFeatureSet(feats, target.true_labels, "target")
    cert = geometry_certificate(source, bad, spec, "osda")
    assert not cert["holds"]
    assert cert["failures"]


def test_certificate_roundtrip(tmp_path):
    spec = SynthSpec(seed=2)
    source, target = generate(spec, "osda")
    cert = geometry_certificate(source, target, spec, "osda")
    path = tmp_path / "geometry.json"
    save_certificate(path, cert)
    import json

    loaded = json.loads(path.read_text())
    assert loaded["holds"] == cert["holds"]
    assert loaded["seed"] == 2


def test_save_load_round_trip_is_exact(tmp_path):
    source, _ = generate(SynthSpec(seed=5), "osda")
    path = tmp_path / "source.csv"
    save_features(path, source)
    loaded = load_features(path, has_labels=True, domain="source")
    np.testing.assert_array_equal(loaded.features, source.features)
    np.testing.assert_array_equal(loaded.true_labels, source.true_labels)


def test_load_features_small_labeled_file(tmp_path):
    path = tmp_path / "feats.csv"
    path.write_text("1,0.5,1.5\n2,-1,2\n1,0,0\n")
    ds = load_features(path, has_labels=True, domain="source")
    assert ds.n == 3 and ds.dim == 2
    np.testing.assert_array_equal(ds.true_labels, [1, 2, 1])


def test_load_features_unlabeled(tmp_path):
    path = tmp_path / "feats.csv"
    path.write_text("0.5,1.5\n-1,2\n")
    ds = load_features(path, has_labels=False, domain="target")
    assert ds.true_labels is None
    assert ds.n == 2


def test_load_features_errors_carry_line_numbers(tmp_path):
    ragged = tmp_path / "ragged.csv"
    ragged.write_text("1,0.5,1.5\n2,-1\n")
    with pytest.raises(FeatureFileError, match="ragged.csv:2"):
        load_features(ragged, has_labels=True, domain="source")

    nonnum = tmp_path / "nonnum.csv"
    nonnum.write_text("1,0.5,oops\n")
    with pytest.raises(FeatureFileError, match="nonnum.csv:1"):
        load_features(nonnum, has_labels=True, domain="source")

    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(FeatureFileError, match="no feature rows"):
        load_features(empty, has_labels=True, domain="source")

    badlabel = tmp_path / "badlabel.csv"
    badlabel.write_text("x,0.5\n")
    with pytest.raises(FeatureFileError, match="not an integer"):
        load_features(badlabel, has_labels=True, domain="source")


def test_feature_set_validation():
    with pytest.raises(ValueError):
        LabeledFeatureSet(np.array([[np.nan, 0.0]]), np.array([1]), "source")
    with pytest.raises(ValueError):
        LabeledFeatureSet(np.zeros((2, 2)), np.array([1]), "source")
    with pytest.raises(ValueError):
        LabeledFeatureSet(np.zeros((2, 2)), np.array([1, 1]), "elsewhere")
