import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import pixel_loop_metrics, same

from metaseg.metrics import (ConfusionMatrix, UndefinedMetricsError, confusion_update,
                             derive_metrics, read_report, write_report)


def test_perfect_prediction(rng):
    y = rng.integers(0, 4, (16, 16))
    cm = confusion_update(ConfusionMatrix(4), y, y)
    assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
    rep = derive_metrics(cm)
    assert rep.oa == 1.0 and rep.miou == 1.0 and rep.f1 == 1.0


def test_binary_swap_scores_zero(rng):
    y = rng.integers(0, 2, (8, 8))
    rep = derive_metrics(ConfusionMatrix(2).update(1 - y, y))
    assert rep.oa == 0.0 and rep.miou == 0.0


def test_empty_update_and_empty_matrix():
    cm = ConfusionMatrix(3)
    cm.update(np.zeros((0, 0), int), np.zeros((0, 0), int))
    assert cm.total == 0
    with pytest.raises(UndefinedMetricsError):
        derive_metrics(cm)


def test_confusion_matches_pixel_loop(rng):
    p, r = rng.integers(0, 3, (16, 16)), rng.integers(0, 3, (16, 16))
    cm = ConfusionMatrix(3).update(p, r)
    ref = np.zeros((3, 3), int)
    for a, b in zip(r.ravel(), p.ravel()):
        ref[a, b] += 1
    assert np.array_equal(cm.counts, ref)


def test_ignore_label_and_range_errors(rng):
    r = rng.integers(0, 3, (6, 6))
    r[0] = 255
    cm = ConfusionMatrix(3).update(rng.integers(0, 3, (6, 6)), r, ignore_label=255)
    assert cm.total == 30
    with pytest.raises(ValueError):
        ConfusionMatrix(3).update(np.full((2, 2), 3), np.zeros((2, 2), int))
    with pytest.raises(ValueError):
        ConfusionMatrix(3).update(np.zeros((2, 3), int), np.zeros((2, 2), int))


@given(st.integers(2, 6), st.integers(0, 2**31))
def test_metrics_match_oracle(K, seed):
    r = np.random.default_rng(seed)
    pred, ref = r.integers(0, K, (32, 32)), r.integers(0, K, (32, 32))
    rep = derive_metrics(ConfusionMatrix(K).update(pred, ref))
    o = pixel_loop_metrics(pred, ref, K)
    for key in ("oa", "miou", "precision", "recall", "f1"):
        assert same(getattr(rep, key), o[key], 1e-12), key
    assert all(same(a, b, 1e-12) for a, b in zip(rep.iou, o["iou"]))


@given(st.integers(2, 5), st.integers(0, 2**31))
def test_counts_invariants(K, seed):
    r = np.random.default_rng(seed)
    maps = [(r.integers(0, K, (5, 5)), r.integers(0, K, (5, 5))) for _ in range(4)]
    a = ConfusionMatrix(K)
    for p, q in maps:
        a.update(p, q)
    b = ConfusionMatrix(K)
    for i in r.permutation(4):
        b.update(*maps[i])
    assert np.array_equal(a.counts, b.counts)
    assert a.total == 100
    assert np.all(a.tp + a.fp + a.fn + a.tn == a.total)
    rep = derive_metrics(a)
    ok = ~np.isnan(rep.iou)
    assert np.all(rep.iou[ok] <= np.fmin(rep.class_precision, rep.class_recall)[ok] + 1e-15)


def test_absent_class_excluded_from_macro_means():
    ref = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 0], [1, 0]])
    rep = derive_metrics(ConfusionMatrix(3).update(pred, ref))
    assert math.isnan(rep.iou[2])
    assert rep.miou == pytest.approx((2 / 3 + 1 / 2) / 2, abs=1e-15)


def test_merge_by_addition(rng):
    p, r = rng.integers(0, 3, (2, 8, 8)), rng.integers(0, 3, (2, 8, 8))
    a = ConfusionMatrix(3).update(p[0], r[0]) + ConfusionMatrix(3).update(p[1], r[1])
    assert np.array_equal(a.counts, ConfusionMatrix(3).update(p, r).counts)


def test_report_round_trip(tmp_path, rng):
    rep = derive_metrics(ConfusionMatrix(3).update(rng.integers(0, 3, (8, 8)), rng.integers(0, 3, (8, 8))),
                         ["a", "b", "c"])
    write_report(rep, tmp_path / "metrics.txt")
    back = read_report(tmp_path / "metrics.txt")
    assert back["miou"] == pytest.approx(rep.miou, rel=1e-9) and "iou.b" in back
    rows = (tmp_path / "metrics_classes.csv").read_text().splitlines()
    assert rows[0] == "class,iou,precision,recall,f1" and len(rows) == 4
