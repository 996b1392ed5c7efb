import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fgdet.boxes import BoundingBox
from fgdet.errors import DataConsistencyError
from fgdet.metrics import (
    GroundTruth,
    MatchConfig,
    ap_by_size,
    ap_range,
    average_precision,
    evaluate,
    f1,
    match_detections,
    mean_ap,
    pr_curve,
    precision_recall,
)
from fgdet.postprocess import Detection
from oracles import envelope_oracle
from published_tables import CLASS_COUNTS, MODEL_SUMMARY


def box(x1, y1, x2, y2):
    return BoundingBox.from_corners(x1, y1, x2, y2)


def det(b, score, cls=0, image="a"):
    return Detection(b, cls, score, image)


def gt(b, cls=0):
    return GroundTruth(b, cls)


# --- counts -----------------------------------------------------------------


def test_precision_recall_examples():
    p, r = precision_recall(10780, 1153, 310)
    # 0.903377: the printed 90.33 is truncated rather than rounded
    assert abs(p - 0.9033) < 1e-4 and round(r, 4) == 0.9720
    assert precision_recall(0, 0, 5) == (0.0, 0.0)
    p, r = precision_recall(1672, 91, 16)
    # printed 94.89 sits 0.0005 off 1672/1763
    assert abs(p - 0.9489) < 0.005
    assert round(r, 4) == 0.9905


def test_f1_examples():
    assert f1(0.8, 0.8) == pytest.approx(0.8)
    assert round(f1(0.9033, 0.9720), 4) == 0.9364
    assert abs(f1(0.9489, 0.9905) - 0.9692) < 1e-4
    assert f1(0, 0) == 0.0


@pytest.mark.parametrize("row", CLASS_COUNTS, ids=lambda r: f"{r[0]}-{r[1]}")
def test_class_count_rows(row):
    _, _, tp, fp, fn, p_pct, r_pct, _ = row
    p, r = precision_recall(tp, fp, fn)
    assert abs(p - p_pct / 100) <= 0.005
    assert abs(r - r_pct / 100) <= 0.005


@pytest.mark.parametrize("row", [r for r in MODEL_SUMMARY if r[0] in ("YOLOv3", "YOLOv4", "Proposed")])
def test_f1_consistent_summary_rows(row):
    _, p, r, want = row
    assert abs(f1(p / 100, r / 100) - want / 100) <= 1e-4


# --- matching ---------------------------------------------------------------


def test_single_match():
    res = match_detections([det(box(0, 0, 10, 6), 0.9)], {"a": [gt(box(0, 0, 10, 10))]})
    assert res.counts(0) == (1, 0, 0)


def test_greedy_highest_score_wins():
    g = {"a": [gt(box(0, 0, 10, 10))]}
    d_hi, d_lo = det(box(0, 0, 10, 9), 0.9), det(box(0, 0, 10, 8), 0.8)
    res = match_detections([d_lo, d_hi], g)
    assert res.counts(0) == (1, 1, 0)
    assert [l.tp for l in res.labeled] == [True, False]
    assert res.labeled[0].det is d_hi


def test_no_detections():
    res = match_detections([], {"a": [gt(box(0, 0, 1, 1))] * 3})
    assert res.counts(0) == (0, 0, 3)


def test_highest_iou_gt_claimed():
    g = {"a": [gt(box(0, 0, 10, 10)), gt(box(1, 0, 11, 10))]}
    res = match_detections([det(box(1, 0, 11, 10), 0.9)], g)
    assert res.labeled[0].gt == ("a", 1)


def test_class_must_agree():
    res = match_detections([det(box(0, 0, 1, 1), 0.9, cls=1)], {"a": [gt(box(0, 0, 1, 1))]})
    assert res.counts(1) == (0, 1, 0)
    assert res.counts(0) == (0, 0, 1)


def test_unknown_image():
    with pytest.raises(DataConsistencyError):
        match_detections([det(box(0, 0, 1, 1), 0.5, image="zzz")], {"a": []})


def test_threshold_inclusive():
    g = {"a": [gt(box(0, 0, 10, 10))]}
    res = match_detections([det(box(0, 0, 10, 6), 0.9)], g, MatchConfig(0.6))
    assert res.counts(0) == (1, 0, 0)


# --- curves and AP ----------------------------------------------------------


def test_pr_curve_examples():
    assert pr_curve([True, False, True], 3) == [(1 / 3, 1.0), (1 / 3, 0.5), (2 / 3, 2 / 3)]
    assert pr_curve([True] * 4, 4)[-1] == (1.0, 1.0)
    assert pr_curve([], 3) == []
    assert pr_curve([False, False], 0) == [(0.0, 0.0), (0.0, 0.0)]


def test_ap_examples():
    assert average_precision(pr_curve([True, False, True], 3)) == pytest.approx(5 / 9)
    assert round(average_precision(pr_curve([True, False, True], 3)), 4) == 0.5556
    assert average_precision(pr_curve([True] * 5, 5)) == 1.0
    assert average_precision(pr_curve([False] * 5, 5)) == 0.0
    assert average_precision([]) == 0.0


@pytest.mark.parametrize("seed", range(100))
def test_ap_equals_exhaustive_oracle(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 11))
    labels = list(r.integers(0, 2, n).astype(bool))
    n_gt = int(sum(labels) + r.integers(0, 4))
    curve = pr_curve(labels, n_gt)
    assert average_precision(curve) == envelope_oracle(curve)


labels = st.lists(st.booleans(), max_size=12)


@given(labels, st.integers(0, 4))
def test_ap_bounds_and_monotone_envelope(ls, extra):
    n_gt = sum(ls) + extra
    curve = pr_curve(ls, n_gt)
    ap = average_precision(curve)
    assert 0.0 <= ap <= 1.0
    rec = [r for r, _ in curve]
    assert rec == sorted(rec)


@given(labels, st.integers(1, 4))
def test_adding_lowest_fp_or_tp(ls, extra):
    n_gt = sum(ls) + extra
    base = average_precision(pr_curve(ls, n_gt))
    assert average_precision(pr_curve(ls + [False], n_gt)) <= base
    assert average_precision(pr_curve(ls + [True], n_gt)) >= base


def test_mean_ap():
    assert mean_ap([0.5, 1.0]) == 0.75
    assert mean_ap([0.3]) == 0.3
    assert mean_ap([0.5, None]) == 0.5
    with pytest.raises(ValueError):
        mean_ap([])


def synthetic(seed, n_images=6, n_classes=4):
    r = np.random.default_rng(seed)
    gts, dets = {}, []
    for i in range(n_images):
        img = f"im{i}"
        items = []
        for _ in range(int(r.integers(0, 6))):
            x, y = r.uniform(0, 200, 2)
            w, h = r.uniform(5, 150, 2)
            items.append(gt(box(x, y, x + w, y + h), int(r.integers(n_classes))))
        gts[img] = items
        for g in items:
            if r.uniform() < 0.8:
                j = r.normal(0, 0.1, 4) * np.array([g.box.w, g.box.h, g.box.w, g.box.h])
                c = np.array(g.box.corners()) + j
                if c[2] > c[0] and c[3] > c[1]:
                    dets.append(det(box(*c), float(r.uniform()), g.class_id, img))
        for _ in range(int(r.integers(0, 3))):
            x, y = r.uniform(0, 200, 2)
            dets.append(det(box(x, y, x + 30, y + 30), float(r.uniform()), int(r.integers(n_classes)), img))
    return dets, gts


def test_four_class_map_matches_oracle():
    dets, gts = synthetic(11)
    rep = evaluate(dets, gts)
    aps = []
    for c in rep.classes:
        ds = sorted((d for d in dets if d.class_id == c.class_id), key=lambda d: (-d.score, d.image_id))
        res = match_detections(ds, gts)
        labs = [l for l in res.labeled if l.det.class_id == c.class_id]
        if c.gt:
            aps.append(envelope_oracle(pr_curve(labs, c.gt)))
    assert rep.map == pytest.approx(sum(aps) / len(aps), abs=1e-15)


def test_ap_range_examples():
    g = {"a": [gt(box(0, 0, 10, 10)), gt(box(20, 0, 30, 10))]}
    perfect = [det(x.box, 0.9) for x in g["a"]]
    r = ap_range(perfect, g)
    assert r["ap"] == 1.0 and r["ap50"] == 1.0 and r["ap75"] == 1.0
    uniform = [det(box(0, 0, 10, 6), 0.9), det(box(20, 0, 30, 6), 0.8)]
    r = ap_range(uniform, g)
    assert [r["per_threshold"][t] for t in sorted(r["per_threshold"])] == [1.0] * 3 + [0.0] * 7
    assert r["ap"] == pytest.approx(0.3)
    r = ap_range([], g)
    assert r["ap"] == 0.0


def test_size_buckets():
    cfg = MatchConfig()
    assert cfg.bucket(1000) == "small"
    assert cfg.bucket(5000) == "medium"
    assert cfg.bucket(96.0**2 + 1) == "large"
    with pytest.raises(ValueError):
        MatchConfig(size_thresholds=(100, 50))
    with pytest.raises(ValueError):
        MatchConfig(0.0)


def test_ap_by_size_empty_buckets_absent():
    g = {"a": [gt(box(0, 0, 10, 10)), gt(box(20, 0, 25, 5))]}
    r = ap_by_size([det(x.box, 0.9) for x in g["a"]], g)
    assert r == {"small": 1.0, "medium": None, "large": None}


@pytest.mark.parametrize("seed", range(5))
def test_ap_by_size_matches_filtered_reevaluation(seed):
    dets, gts = synthetic(seed, n_images=10)
    cfg = MatchConfig()
    got = ap_by_size(dets, gts, cfg)
    full = match_detections(dets, gts, cfg)
    for name in ("small", "medium", "large"):
        keep_gt = {img: [g for g in items if cfg.bucket(g.box.area) == name] for img, items in gts.items()}
        dropped = set()
        for lab in full.labeled:
            if lab.tp and cfg.bucket(gts[lab.gt[0]][lab.gt[1]].box.area) != name:
                dropped.add(id(lab.det))
        keep_det = [d for d in dets if id(d) not in dropped]
        if not any(keep_gt.values()):
            assert got[name] is None
            continue
        rep = evaluate(keep_det, keep_gt, cfg=cfg)
        assert got[name] == pytest.approx(rep.map, abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_tp_plus_fn_is_gt_count(seed):
    dets, gts = synthetic(seed % 1000)
    rep = evaluate(dets, gts)
    for c in rep.classes:
        assert c.tp + c.fn == c.gt
        for v in (c.precision, c.recall, c.f1):
            assert 0.0 <= v <= 1.0
        assert c.ap is None or 0.0 <= c.ap <= 1.0


@given(st.integers(0, 2**32 - 1))
def test_permutation_invariance(seed):
    dets, gts = synthetic(seed % 997)
    r = np.random.default_rng(seed)
    perm = r.permutation(len(dets))
    shuffled_gts = {k: gts[k] for k in r.permutation(list(gts))}
    a = evaluate(dets, gts, with_range=True).to_json()
    b = evaluate([dets[i] for i in perm], shuffled_gts, with_range=True).to_json()
    assert a == b


def test_threads_do_not_change_report():
    dets, gts = synthetic(3, n_images=30)
    one = evaluate(dets, gts, with_range=True, with_sizes=True, threads=1).to_json()
    many = evaluate(dets, gts, with_range=True, with_sizes=True, threads=4).to_json()
    assert one == many


def test_report_format():
    dets, gts = synthetic(5)
    rep = evaluate(dets, gts, ["a", "b", "c", "d", "e"], with_range=True, with_sizes=True)
    d = json.loads(rep.to_json())
    assert list(d) == ["iou_threshold", "classes", "overall", "ap_range", "ap_by_size"]
    assert list(d["classes"][0]) == ["class_id", "name", "gt", "tp", "fp", "fn", "precision", "recall", "f1", "ap"]
    assert "e" in d["overall"]["excluded_classes"]
    assert "excluded from mAP" in rep.to_text()
    csv = rep.curves_csv().splitlines()
    assert csv[0] == "class,rank,recall,precision"
    assert len(csv) == 1 + len(dets)
