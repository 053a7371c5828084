import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from twincount.evalkit import (EmptyLabeledSetError, evaluate, export_embeddings,
                               line_chart_svg, metrics_from_predictions, read_embeddings,
                               round_half_away, write_report)
from twincount.trainer import HistoryRecord, TrainingHistory
from twincount.twinvae import ModelConfig, TwinVAE


def test_perfect_predictions():
    m = metrics_from_predictions([1, 4, 9], [1.0, 4.0, 9.0])
    assert (m.mae, m.mre, m.acc, m.n) == (0.0, 0.0, 100.0, 3)


def test_single_sample_arithmetic():
    m = metrics_from_predictions([10], [11.0])
    assert m.mae == 1.0 and m.mre == pytest.approx(10.0) and m.acc == 0.0


def test_unlabeled_items_ignored():
    m = metrics_from_predictions([-1, 2, 0], [50.0, 2.2, 7.0])
    assert m.n == 1 and m.mae == pytest.approx(0.2)
    with pytest.raises(EmptyLabeledSetError):
        metrics_from_predictions([-1, 0], [1.0, 2.0])


def test_rounding_ties_away_from_zero():
    assert round_half_away([2.5, 3.5, -2.5, 2.4999]).tolist() == [3, 4, -3, 2]


@given(st.lists(st.tuples(st.integers(1, 30), st.floats(-5, 40, allow_nan=False)),
                min_size=1, max_size=50))
def test_accuracy_consistent_with_error(pairs):
    labels, preds = map(np.array, zip(*pairs))
    m = metrics_from_predictions(labels, preds)
    err = np.abs(labels - preds)
    assert 0 <= m.acc <= 100 and m.mae >= 0
    # within half a count is always correct, beyond it never is (ties may go either way)
    assert m.acc >= 100 * (err < 0.5).mean() - 1e-9
    assert m.acc <= 100 * (err <= 0.5).mean() + 1e-9


class _Fixed:
    """Stand-in model with known predictions, used to check evaluate() plumbing."""

    def __init__(self, preds):
        self.preds = np.asarray(preds)

    def predict(self, images, origin, batch_size=64):
        return self.preds[: len(images)]


def test_evaluate_uses_labeled_subset():
    from twincount.datapipe import Dataset
    ds = Dataset(np.zeros((3, 128, 128), np.float32), [2, -1, 5], "natural")
    m = evaluate(_Fixed([2.0, 4.0]), ds)
    assert m.n == 2 and m.mae == 0.5 and m.acc == 50.0


@pytest.fixture(scope="module")
def model():
    return TwinVAE(ModelConfig.scaled(16), seed=0)


def test_embeddings_rows_round_trip_and_repeat(tiny_pools, model, tmp_path):
    _, syn, _ = tiny_pools
    a = export_embeddings(model, syn, tmp_path / "a.csv", batch_size=10)
    export_embeddings(model, syn, tmp_path / "b.csv", batch_size=10)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    vectors, rows = read_embeddings(a)
    assert vectors.shape == (len(syn), 256) and len(rows) == len(syn)
    mu, _ = model.encode(syn.images[:10], "synthetic")
    model.clear_caches()
    np.testing.assert_allclose(vectors[:10], mu, rtol=1e-8, atol=1e-12)
    assert rows[0]["origin"] == "synthetic" and rows[0]["filename"] == syn.filenames[0]
    assert int(rows[0]["label"]) == syn.labels[0]


def _history(scale):
    h = TrainingHistory()
    for e in (1, 10, 20):
        h.add(HistoryRecord(e, scale / e, 1.0, 1.0, 1.0, val_mae=scale / e, val_acc=e * 2.0))
    return h


def _svg_ok(text):
    root = ET.fromstring(text)   # raises on unbalanced tags
    return root.tag.endswith("svg") and root.get("viewBox")


def test_svg_well_formed_with_escaping():
    svg = line_chart_svg({"a<b": ([0, 1], [1.0, float("nan")])}, "t & u", "x", "y")
    assert _svg_ok(svg)


def test_report_bundle(tmp_path):
    files = write_report({"scratch": _history(5.0), "transfer": _history(2.0)}, {}, tmp_path / "r")
    names = sorted(p.split("/")[-1] for p in files)
    assert names == ["history_scratch.csv", "history_transfer.csv", "loss.svg",
                     "val_acc.svg", "val_mae.svg"]
    svg = (tmp_path / "r" / "val_mae.svg").read_text()
    assert _svg_ok(svg) and "scratch" in svg and "transfer" in svg
    assert svg.count("<polyline") == 2
    with pytest.raises(ValueError):
        write_report(TrainingHistory(), {}, tmp_path / "s")
