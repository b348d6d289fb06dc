import csv
import json
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbsense.evaluate import (
    argmax_lowest,
    average_accuracy,
    confusion_from_predictions,
    confusion_matrix,
    export_latents,
    predict_logits,
    write_metrics,
)
from mbsense.fusion import ModelDims, build_model


def test_identity_classifier_gives_identity_matrix():
    y = np.repeat(np.arange(4), 5)
    cm = confusion_from_predictions(y, y, 4)
    np.testing.assert_array_equal(cm.values, np.eye(4))
    assert average_accuracy(cm) == 1.0


def test_constant_classifier_gives_one_over_k():
    y = np.repeat(np.arange(4), 5)
    cm = confusion_from_predictions(np.full(20, 2), y, 4)
    np.testing.assert_array_equal(cm.values[2], np.ones(4))
    assert average_accuracy(cm) == pytest.approx(0.25)


def test_hand_matrix_and_class_mean_accuracy():
    true = [0, 0, 0, 0, 1, 1]
    pred = [0, 0, 0, 1, 1, 0]
    cm = confusion_from_predictions(pred, true, 2)
    np.testing.assert_allclose(cm.values, [[0.75, 0.5], [0.25, 0.5]])
    # class mean, not sample accuracy (4/6)
    assert average_accuracy(cm) == pytest.approx(0.625)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 8), st.integers(1, 60), st.integers(0, 10_000))
def test_defined_columns_sum_to_one(k, n, seed):
    rng = np.random.default_rng(seed)
    true = rng.integers(0, k, n)
    pred = rng.integers(0, k, n)
    cm = confusion_from_predictions(pred, true, k)
    sums = cm.values.sum(axis=0)
    for j in range(k):
        expected = 1.0 if j not in cm.undefined else 0.0
        assert sums[j] == pytest.approx(expected, abs=1e-12)
    assert cm.counts.sum() == n


def test_missing_class_warns_and_is_excluded():
    true = [0, 0, 2, 2]
    pred = [0, 1, 2, 2]
    cm = confusion_from_predictions(pred, true, 3)
    assert cm.undefined == [1]
    assert np.all(cm.values[:, 1] == 0)
    with pytest.warns(RuntimeWarning, match=r"\[1\]"):
        acc = average_accuracy(cm)
    assert acc == pytest.approx(0.75)


def test_invalid_labels_rejected():
    with pytest.raises(ValueError):
        confusion_from_predictions([0, 3], [0, 1], 3)
    with pytest.raises(ValueError):
        confusion_from_predictions([0], [0, 1], 3)


def test_ties_resolve_to_lowest_index():
    scores = np.array([[1.0, 3.0, 3.0], [2.0, 2.0, 2.0]])
    assert argmax_lowest(scores).tolist() == [1, 0]


def test_model_confusion_and_class_mismatch(small_data):
    _, test, _ = small_data
    model = build_model("granularity_matching", dims=ModelDims(num_classes=4), seed=0)
    cm = confusion_matrix(model, test)
    assert cm.values.shape == (4, 4)
    assert cm.support.tolist() == [6, 6, 6, 6]
    logits = predict_logits(model, test.csi, test.bsnr_standardized(), batch_size=5)
    np.testing.assert_array_equal(cm.counts.sum(axis=1), np.bincount(logits.argmax(1), minlength=4))
    wrong = build_model("granularity_matching", dims=ModelDims(num_classes=8), seed=0)
    with pytest.raises(ValueError, match="4 classes"):
        confusion_matrix(wrong, test)
    with pytest.raises(ValueError):
        confusion_matrix(model, replace(test, labels=np.full(len(test), -1)))


def test_latent_export_header_and_rows(small_data, tmp_path):
    _, test, _ = small_data
    model = build_model("granularity_matching", dims=ModelDims(num_classes=4, latent_dim=12), seed=1)
    table = export_latents(model, test, tmp_path / "latents.csv", batch_size=7)
    rows = list(csv.reader(open(tmp_path / "latents.csv")))
    assert rows[0] == [f"f{k}" for k in range(12)] + ["label"]
    assert len(rows) == 1 + len(test)
    assert table.shape == (len(test), 13)
    np.testing.assert_array_equal(table[:, -1], test.labels)
    np.testing.assert_allclose(np.array(rows[1][:-1], dtype=float), table[0, :-1], rtol=0, atol=0)


def test_write_metrics(tmp_path):
    cm = confusion_from_predictions([0, 1, 1], [0, 1, 0], 2, class_names=["a", "b"])
    write_metrics(cm, tmp_path / "m", extra={"variant": "csi_only"})
    summary = json.loads((tmp_path / "m" / "metrics.json").read_text())
    assert summary["average_accuracy"] == pytest.approx(0.75)
    assert summary["per_class_counts"] == [2, 1]
    assert summary["variant"] == "csi_only"
    rows = list(csv.reader(open(tmp_path / "m" / "confusion.csv")))
    assert rows[0] == ["predicted\\true", "a", "b"]
    assert [float(x) for x in rows[1][1:]] == [0.5, 0.0]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        write_metrics(cm, tmp_path / "m")
