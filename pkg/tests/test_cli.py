import json

import numpy as np
import pytest

from fgdet.cli import main
from fgdet.dataio import Annotation, ImageBuffer, VocObject, write_ppm, write_voc_xml
from published_tables import CLASS_COUNTS

NAMES = ["Early Blight", "Late Blight", "Septoria", "Leaf Mold"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def build_count_fixture(root, model="Proposed"):
    """VOC ground truth plus a detections file whose matches reproduce the
    per-class TP/FP/FN counts: TP slots carry a GT and an identical detection,
    FN slots only a GT, FP slots only a detection. Slots never overlap."""
    rows = [r for r in CLASS_COUNTS if r[0] == model and r[1] != "All"]
    slots = []
    for cls, (_, name, tp, fp, fn, *_rest) in enumerate(rows):
        slots += [(cls, "tp")] * tp + [(cls, "fn")] * fn + [(cls, "fp")] * fp
    per_image = 400
    gt_dir = root / "gt"
    gt_dir.mkdir()
    lines = []
    for k in range(0, len(slots), per_image):
        image = f"img{k // per_image:03d}"
        objs = []
        for s, (cls, kind) in enumerate(slots[k : k + per_image]):
            x, y = 20 * (s % 20) + 2, 20 * (s // 20) + 2
            if kind != "fp":
                objs.append(VocObject(NAMES[cls], x, y, x + 10, y + 10))
            if kind != "fn":
                lines.append(f"{image} {cls} 0.9 {x} {y} {x + 10} {y + 10}")
        (gt_dir / f"{image}.xml").write_bytes(write_voc_xml(Annotation(f"{image}.ppm", 416, 416, 3, objs)))
    dets = root / "dets.txt"
    dets.write_text("\n".join(lines) + "\n")
    return gt_dir, dets


@pytest.fixture(scope="module")
def count_fixture(tmp_path_factory):
    return build_count_fixture(tmp_path_factory.mktemp("counts"))


def test_eval_reproduces_table_counts(capsys, count_fixture):
    gt_dir, dets = count_fixture
    code, out, _ = run(capsys, "--format", "json", "eval", "--gt", gt_dir, "--dets", dets,
                       "--iou", 0.5, "--class-names", ",".join(NAMES))
    assert code == 0
    rep = json.loads(out)
    o = rep["overall"]
    assert (o["tp"], o["fn"]) == (10780, 310)
    # per-class FP rows sum to 1154; the summary row prints 1153
    assert o["fp"] == 1154
    assert round(100 * o["precision"], 2) == 90.33
    assert round(100 * o["recall"], 2) == 97.20
    assert round(100 * o["f1"], 2) == 93.64
    by_name = {c["name"]: c for c in rep["classes"]}
    assert (by_name["Leaf Mold"]["tp"], by_name["Leaf Mold"]["fp"], by_name["Leaf Mold"]["fn"]) == (1672, 91, 16)


def test_eval_threads_deterministic(capsys, count_fixture):
    gt_dir, dets = count_fixture
    outs = []
    for t in ("1", "4"):
        code, out, _ = run(capsys, "--format", "json", "--threads", t, "eval", "--gt", gt_dir, "--dets", dets, "--range")
        assert code == 0
        outs.append(out)
    assert outs[0] == outs[1]


def small_gt(tmp_path):
    gt_dir = tmp_path / "gt"
    gt_dir.mkdir()
    ann = Annotation("a.ppm", 64, 64, 3, (VocObject("leaf_mold", 4, 4, 20, 20),))
    (gt_dir / "a.xml").write_bytes(write_voc_xml(ann))
    return gt_dir


def test_eval_empty_dets(capsys, tmp_path):
    gt_dir = small_gt(tmp_path)
    (tmp_path / "d.txt").write_text("")
    code, out, _ = run(capsys, "--format", "json", "eval", "--gt", gt_dir, "--dets", tmp_path / "d.txt",
                       "--curves", tmp_path / "c.csv", "--sizes")
    assert code == 0
    o = json.loads(out)["overall"]
    assert (o["tp"], o["fp"], o["precision"], o["recall"], o["f1"], o["map"]) == (0, 0, 0.0, 0.0, 0.0, 0.0)
    assert (tmp_path / "c.csv").read_text() == "class,rank,recall,precision\n"


def test_eval_errors(capsys, tmp_path):
    gt_dir = small_gt(tmp_path)
    (tmp_path / "d.txt").write_text("other 0 0.9 1 1 5 5\n")
    code, _, err = run(capsys, "eval", "--gt", gt_dir, "--dets", tmp_path / "d.txt")
    assert code == 3 and "other" in err
    code, _, _ = run(capsys, "eval", "--gt", tmp_path / "missing", "--dets", tmp_path / "d.txt")
    assert code == 2
    code, _, _ = run(capsys, "eval", "--gt", gt_dir, "--dets", tmp_path / "nope.txt")
    assert code == 2


def test_summary(capsys):
    code, out, _ = run(capsys, "--format", "json", "summary", "--classes", 4, "--input-size", 416)
    assert code == 0
    heads = json.loads(out)["heads"]
    assert [(h["grid"], h["depth"]) for h in heads] == [(52, 27), (26, 27), (13, 27)]
    code, out, _ = run(capsys, "summary", "--classes", 1, "--input-size", 64)
    assert code == 0
    assert "8x8 grid" in out and "4x4 grid" in out and "2x2 grid" in out
    code, _, err = run(capsys, "summary", "--classes", 1, "--input-size", 100)
    assert code == 2 and "multiple of 32" in err


def test_loss(capsys):
    assert run(capsys, "loss", "--pred", "0,0,1,1", "--gt", "0,0,1,1", "--kind", "ciou")[1].strip() == "0.000000"
    assert run(capsys, "loss", "--pred", "0,0,1,1", "--gt", "2,2,3,3", "--kind", "giou")[1].strip() == "1.777778"
    code, _, _ = run(capsys, "loss", "--pred", "0,0,1,1", "--gt", "0,0,1,0", "--kind", "ciou")
    assert code == 2


def test_unknown_flag_is_an_error(capsys):
    with pytest.raises(SystemExit) as e:
        main(["loss", "--pred", "0,0,1,1", "--gt", "0,0,1,1", "--colour"])
    assert e.value.code == 2


def test_nms(capsys, tmp_path):
    f = tmp_path / "d.txt"
    f.write_text("a 0 0.9 0 0 10 10\na 0 0.8 0 0 10 6\na 1 0.8 0 0 10 6\na 0 0.29 50 50 60 60\n")
    code, out, _ = run(capsys, "nms", "--in", f, "--iou", 0.5, "--conf", 0.3)
    assert code == 0
    assert out.splitlines() == [
        "a 0 0.900000 0.000000 0.000000 10.000000 10.000000",
        "a 1 0.800000 0.000000 0.000000 10.000000 6.000000",
    ]
    code, _, _ = run(capsys, "nms", "--in", f, "--iou", 0)
    assert code == 2


def test_gradcheck(capsys):
    code, out, _ = run(capsys, "--format", "json", "gradcheck", "--samples", 100, "--seed", 1)
    assert code == 0
    rep = json.loads(out)
    assert rep["passed"] and rep["max_rel_err"] < 1e-4
    assert run(capsys, "--format", "json", "gradcheck", "--samples", 100, "--seed", 1)[1] == out
    assert run(capsys, "gradcheck", "--samples", 0)[0] == 2
    assert run(capsys, "gradcheck", "--samples", 20, "--tol", 1e-14)[0] == 4


def write_config(tmp_path, classes=4):
    p = tmp_path / f"cfg{classes}.yaml"
    names = ", ".join(f"c{i}" for i in range(classes))
    p.write_text(f"classes: [{names}]\nnetwork: {{preset: improved, input_size: 64, width_mult: 0.125}}\n")
    return p


def test_decode(capsys, tmp_path):
    cfg = write_config(tmp_path)
    img = tmp_path / "leaf.ppm"
    write_ppm(ImageBuffer(np.random.default_rng(0).integers(0, 256, (64, 64, 3), dtype=np.uint8)), img)
    assert run(capsys, "--config", cfg, "init-weights", "--out", tmp_path / "z.w", "--zero")[0] == 0
    code, out, _ = run(capsys, "--config", cfg, "decode", "--weights", tmp_path / "z.w", "--image", img,
                       "--conf", 0.3, "--iou", 0.5)
    assert code == 0 and out == ""
    code, out, _ = run(capsys, "--config", cfg, "decode", "--weights", tmp_path / "z.w", "--image", img, "--conf", 0.25)
    assert code == 0 and len(out.splitlines()) > 0
    assert run(capsys, "--config", cfg, "--seed", 5, "init-weights", "--out", tmp_path / "r.w")[0] == 0
    outs = [
        run(capsys, "--config", cfg, "--threads", t, "decode", "--weights", tmp_path / "r.w", "--image", img, "--conf", 0.0)[1]
        for t in ("1", "3", "1")
    ]
    assert outs[0] == outs[1] == outs[2] and outs[0]
    code, _, err = run(capsys, "--config", write_config(tmp_path, 2), "decode", "--weights", tmp_path / "r.w", "--image", img)
    assert code == 2 and "head52" in err
    small = tmp_path / "small.ppm"
    write_ppm(ImageBuffer(np.zeros((32, 32, 3), dtype=np.uint8)), small)
    assert run(capsys, "--config", cfg, "decode", "--weights", tmp_path / "r.w", "--image", small)[0] == 2
    assert run(capsys, "decode", "--weights", tmp_path / "r.w", "--image", img)[0] == 2


def test_augment(capsys, tmp_path):
    (tmp_path / "in").mkdir()
    img = ImageBuffer(np.random.default_rng(0).integers(0, 256, (6, 8, 3), dtype=np.uint8))
    write_ppm(img, tmp_path / "in" / "x.ppm")
    ann = Annotation("x.ppm", 8, 6, 3, (VocObject("c", 1, 1, 4, 5),))
    (tmp_path / "in" / "x.xml").write_bytes(write_voc_xml(ann))
    (tmp_path / "in" / "m.json").write_text('{"x": {"image": "x.ppm", "annotation": "x.xml"}}')
    code, out, _ = run(capsys, "--format", "json", "augment", "--in", tmp_path / "in" / "m.json", "--out", tmp_path / "out")
    assert code == 0 and json.loads(out)["outputs"] == 10
    ops = tmp_path / "ops.yaml"
    ops.write_text("augment:\n  ops:\n    - {type: mirror_horizontal}\n")
    code, out, _ = run(capsys, "augment", "--in", tmp_path / "in" / "m.json", "--out", tmp_path / "o2", "--ops-config", ops)
    assert code == 0 and "2 outputs" in out
    assert run(capsys, "augment", "--in", tmp_path / "nope.json", "--out", tmp_path / "o3")[0] == 2
