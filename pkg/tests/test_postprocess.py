import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fgdet.boxes import BoundingBox, iou
from fgdet.errors import ShapeError
from fgdet.postprocess import (
    AnchorSet,
    Detection,
    decode_head,
    decode_heads,
    filter_confidence,
    format_line,
    nms,
    parse_detections,
    to_json,
)


def D(x1, y1, x2, y2, score, cls=0, image="img", order=0):
    return Detection(BoundingBox.from_corners(x1, y1, x2, y2), cls, score, image, order)


def test_zero_head():
    anchors = [(10, 13), (16, 30), (33, 23)]
    cands = decode_head(np.zeros((4, 4, 3 * 9)), anchors, stride=8)
    assert len(cands) == 4 * 4 * 3
    for k, d in enumerate(cands):
        cell, a = divmod(k, 3)
        row, col = divmod(cell, 4)
        assert d.score == 0.25
        assert (d.box.cx, d.box.cy) == (8 * (col + 0.5), 8 * (row + 0.5))
        assert (d.box.w, d.box.h) == anchors[a]


def test_saturated_cell():
    head = np.zeros((2, 2, 6))
    head[1, 0, 4] = 100.0
    head[1, 0, 5] = 100.0
    best = max(decode_head(head, [(4, 4)], 1), key=lambda d: d.score)
    assert best.score == pytest.approx(1.0)


def sig(v):
    return 1 / (1 + math.exp(-v))


def test_matches_per_cell_interpreter():
    r = np.random.default_rng(0)
    b, c, stride = 2, 3, 16
    anchors = [(20.0, 30.0), (50.0, 40.0)]
    head = r.normal(size=(2, 2, b * (5 + c)))
    got = decode_head(head, anchors, stride)
    k = 0
    for row in range(2):
        for col in range(2):
            for a in range(b):
                t = head[row, col, a * (5 + c) : (a + 1) * (5 + c)]
                cls = [sig(v) for v in t[5:]]
                best = max(range(c), key=lambda i: cls[i])
                d = got[k]
                assert d.class_id == best
                assert d.score == pytest.approx(sig(t[4]) * cls[best], rel=1e-12)
                assert d.box.cx == pytest.approx((sig(t[0]) + col) * stride, rel=1e-12)
                assert d.box.cy == pytest.approx((sig(t[1]) + row) * stride, rel=1e-12)
                assert d.box.w == pytest.approx(anchors[a][0] * math.exp(t[2]), rel=1e-12)
                assert d.box.h == pytest.approx(anchors[a][1] * math.exp(t[3]), rel=1e-12)
                k += 1


def test_depth_mismatch():
    with pytest.raises(ShapeError):
        decode_head(np.zeros((2, 2, 26)), [(1, 1)] * 3, 8)


def test_decode_heads_count_and_determinism():
    r = np.random.default_rng(1)
    heads = [r.normal(size=(n, n, 27)) for n in (8, 4, 2)]
    a = decode_heads(heads, AnchorSet.default(64), 64, "x")
    b = decode_heads([h.copy() for h in heads], AnchorSet.default(64), 64, "x")
    assert len(a) == 3 * (64 + 16 + 4)
    assert a == b
    assert [d.order for d in a] == list(range(len(a)))


def test_anchor_set_validation():
    with pytest.raises(ValueError):
        AnchorSet((((1, 1),), ((1, 1),)))
    with pytest.raises(ValueError):
        AnchorSet((((1, 1),), ((1, 1),), ((1, 0),)))
    assert AnchorSet.default(832).scales[0][0] == (20.0, 26.0)


def test_filter_examples():
    ds = [D(0, 0, 1, 1, s, order=i) for i, s in enumerate([0.9, 0.31, 0.29])]
    assert len(filter_confidence(ds, 0.3)) == 2
    assert len(filter_confidence(ds, 0.0)) == 3
    one = [D(0, 0, 1, 1, 1.0), D(0, 0, 1, 1, 0.999999)]
    assert [d.score for d in filter_confidence(one, 1.0)] == [1.0]


def test_filter_tie_break():
    ds = [D(0, 0, 1, 1, 0.5, cls=1, order=0), D(0, 0, 1, 1, 0.5, cls=0, order=2), D(0, 0, 1, 1, 0.5, cls=0, order=1)]
    assert [(d.class_id, d.order) for d in filter_confidence(ds, 0)] == [(0, 1), (0, 2), (1, 0)]


def test_nms_examples():
    a, b = D(0, 0, 10, 10, 0.9), D(0, 0, 10, 6, 0.8, order=1)
    assert iou(a.box, b.box) == pytest.approx(0.6)
    assert nms([b, a], 0.5) == [a]
    b2 = D(0, 0, 10, 6, 0.8, cls=1, order=1)
    assert nms([a, b2], 0.5) == [a, b2]
    far = D(20, 20, 30, 30, 0.1, order=2)
    assert nms([a, far], 0.5) == [a, far]
    with pytest.raises(ValueError):
        nms([a], 0.0)


def test_nms_keeps_images_apart():
    a, b = D(0, 0, 10, 10, 0.9, image="p"), D(0, 0, 10, 10, 0.8, image="q")
    assert len(nms([a, b], 0.5)) == 2


def random_dets(seed, n):
    r = np.random.default_rng(seed)
    out = []
    for i in range(n):
        x, y = r.uniform(0, 40, 2)
        w, h = r.uniform(1, 15, 2)
        out.append(D(x, y, x + w, y + h, float(r.choice([r.uniform(), 0.5])), int(r.integers(3)), order=i))
    return out


@given(st.integers(0, 2**32 - 1), st.integers(0, 30), st.floats(0.05, 1.0))
def test_nms_properties(seed, n, thr):
    dets = random_dets(seed, n)
    kept = nms(dets, thr)
    assert set(kept) <= set(dets)
    assert nms(kept, thr) == kept
    assert [d.score for d in kept] == sorted((d.score for d in kept), reverse=True)
    for i, a in enumerate(kept):
        for b in kept[i + 1 :]:
            if a.class_id == b.class_id:
                assert iou(a.box, b.box) <= thr


@given(st.integers(0, 2**32 - 1), st.integers(0, 20))
def test_nms_order_independent(seed, n):
    dets = random_dets(seed, n)
    perm = np.random.default_rng(seed).permutation(n)
    assert nms([dets[i] for i in perm], 0.5) == nms(dets, 0.5)


def test_detection_validation():
    with pytest.raises(ValueError):
        D(0, 0, 1, 1, 1.5)
    with pytest.raises(ValueError):
        D(0, 0, 1, 1, 0.5, cls=-1)


def test_text_and_json_round_trip():
    ds = random_dets(4, 10)
    text = "\n".join(format_line(d) for d in ds)
    back = parse_detections(text)
    for a, b in zip(ds, back):
        assert a.class_id == b.class_id and a.image_id == b.image_id
        assert b.score == pytest.approx(a.score, abs=1e-6)
        np.testing.assert_allclose(b.box.corners(), a.box.corners(), atol=1e-6)
    back = parse_detections(to_json(ds))
    np.testing.assert_allclose([d.box.corners() for d in back], [d.box.corners() for d in ds], rtol=1e-12)
    assert format_line(D(1, 2, 3, 4, 0.5)) == "img 0 0.500000 1.000000 2.000000 3.000000 4.000000"
    with pytest.raises(ValueError):
        parse_detections("img 0 0.5 1 2 3")
