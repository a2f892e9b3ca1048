import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sadg import metrics as M


def pair_count_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    count = 0.0
    for p in pos:
        for n in neg:
            count += 1.0 if p > n else 0.5 if p == n else 0.0
    return count / (len(pos) * len(neg)) * 100.0


def sweep_rates(scores, labels, thr):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    far = sum(1 for s in pos if s < thr) / len(pos)
    frr = sum(1 for s in neg if s >= thr) / len(neg)
    return far, frr


def sweep_candidates(scores):
    u = sorted(set(float(s) for s in scores))
    return [u[0] - 1.0] + [(a + b) / 2.0 for a, b in zip(u, u[1:])] + [u[-1] + 1.0]


def sweep_eer(scores, labels):
    best, best_gap = None, None
    for thr in sweep_candidates(scores):  # ascending, so strict < keeps the lowest on ties
        far, frr = sweep_rates(scores, labels, thr)
        if best_gap is None or abs(far - frr) < best_gap:
            best, best_gap = thr, abs(far - frr)
    return best


def sweep_roc(scores, labels):
    npos = sum(labels)
    nneg = len(labels) - npos
    pts = []
    for thr in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if y == 1 and s >= thr)
        fp = sum(1 for s, y in zip(scores, labels) if y == 0 and s >= thr)
        pts.append((fp / nneg, tp / npos, float(thr)))
    return [(0.0, 0.0, float("inf"))] + pts


def random_case(rng, n, ties=False):
    labels = rng.integers(0, 2, n)
    labels[:2] = [0, 1]
    scores = rng.integers(0, 10, n) / 10.0 if ties else rng.uniform(size=n)
    return scores, labels


def test_perfect_separation():
    s, y = [0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]
    assert M.auc(s, y) == 100.0
    assert (0.0, 1.0) in [(f, t) for f, t, _ in M.roc_curve(s, y)]
    hter, thr = M.hter_at_eer(s, y, s, y)
    assert hter == 0.0 and 0.2 < thr < 0.8


def test_identical_scores_roc():
    assert [(f, t) for f, t, _ in M.roc_curve([0.5] * 4, [0, 1, 0, 1])] == [(0.0, 0.0), (1.0, 1.0)]
    assert M.auc([0.5] * 4, [0, 1, 0, 1]) == 50.0


def test_single_class_is_an_error():
    for fn in (M.roc_curve, M.auc):
        with pytest.raises(ValueError, match="both classes"):
            fn([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        M.hter_at_eer([0.1, 0.2], [0, 1], [0.1, 0.2], [0, 0])


def test_auc_equals_pair_count_exactly():
    rng = np.random.default_rng(0)
    for i in range(200):
        n = int(rng.integers(2, 201))
        s, y = random_case(rng, n, ties=bool(i % 2))
        assert M.auc(s, y) == pair_count_auc(s, y)
        assert isinstance(M.auc(s, y), float)


def test_auc_antisymmetry_and_monotone_invariance():
    rng = np.random.default_rng(1)
    for _ in range(50):
        s, y = random_case(rng, 60)
        a = M.auc(s, y)
        assert M.auc(-s, y) == pytest.approx(100.0 - a, abs=1e-12)
        assert M.auc(np.exp(3 * s) + 7, y) == a


def test_roc_matches_threshold_sweep():
    rng = np.random.default_rng(2)
    for i in range(50):
        s, y = random_case(rng, 50, ties=bool(i % 2))
        got = M.roc_curve(s, y)
        assert got == sweep_roc(list(s), list(y))
        fpr, tpr = [p[0] for p in got], [p[1] for p in got]
        assert got[0][:2] == (0.0, 0.0) and got[-1][:2] == (1.0, 1.0)
        assert all(np.diff(fpr) >= 0) and all(np.diff(tpr) >= 0)


def test_hter_matches_sweep_oracle():
    rng = np.random.default_rng(3)
    for i in range(50):
        s, y = random_case(rng, 100, ties=bool(i % 2))
        ts, ty = random_case(rng, 100, ties=bool(i % 3 == 0))
        hter, thr = M.hter_at_eer(s, y, ts, ty)
        oracle_thr = sweep_eer(list(ts), list(ty))
        far, frr = sweep_rates(list(s), list(y), oracle_thr)
        assert thr == oracle_thr
        assert hter == (far + frr) / 2.0 * 100.0
        assert 0.0 <= hter <= 100.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 1)), min_size=2, max_size=40))
def test_eer_threshold_property(pairs):
    s = [p[0] / 20 for p in pairs]
    y = [p[1] for p in pairs]
    if len(set(y)) < 2:
        return
    assert M.eer_threshold(s, y) == sweep_eer(s, y)


def test_report_record_and_roc_csv(tmp_path):
    s, y = [0.9, 0.3, 0.4, 0.1], [1, 1, 0, 0]
    rep = M.evaluate_scores(s, y, run_id="r1", target="B")
    assert rep.threshold_policy == "target"
    rec = json.loads(rep.to_json_line())
    for key in ("hter", "auc", "eer_threshold", "run_id", "target"):
        assert key in rec
    assert rec["auc"] == pytest.approx(75.0)
    rep.write(tmp_path / "r.json")
    assert M.read_report(tmp_path / "r.json") == rec
    rep.write_roc(tmp_path / "roc.csv")
    lines = (tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == "fpr,tpr,threshold"
    assert len(lines) == 1 + len(rep.roc)

    src = M.evaluate_scores(s, y, [0.8, 0.2], [1, 0])
    assert src.threshold_policy == "source" and src.eer_threshold == 0.5


def test_report_range_is_validated():
    with pytest.raises(ValueError):
        M.MetricsReport(hter=120.0, auc=50.0, eer_threshold=0.5, roc=[])
