"""Detection evaluation: matching, precision/recall/F1, PR curves, AP and mAP.

Matching is greedy: within each (image, class), detections are visited in
descending score order and each one claims the unmatched ground truth of the
same class with the highest IoU, provided that IoU reaches the threshold.
Ground truths are single-use. AP is the all-point interpolated area under the
precision envelope, computed in exact rational arithmetic.

Boxes are treated as continuous coordinates; box area is ``w * h`` with no
``+1`` pixel correction.
"""

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from fgdet.boxes import iou_matrix
from fgdet.errors import DataConsistencyError

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class GroundTruth:
    box: object  # BoundingBox
    class_id: int


@dataclass(frozen=True)
class MatchConfig:
    iou_threshold: float = 0.5
    size_thresholds: tuple = (32.0**2, 96.0**2)

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must lie in (0, 1], got {self.iou_threshold}")
        small, medium = self.size_thresholds
        if not small < medium:
            raise ValueError("small_max_area must be below medium_max_area")

    def bucket(self, area):
        small, medium = self.size_thresholds
        if area <= small:
            return "small"
        if area <= medium:
            return "medium"
        return "large"


@dataclass(frozen=True)
class Labeled:
    """A detection with its match outcome. ``gt`` is ``(image_id, index)`` when TP."""

    det: object
    tp: bool
    gt: tuple = None


@dataclass
class MatchResult:
    labeled: list
    gt_counts: dict
    fn: dict

    def by_class(self):
        out = {}
        for lab in self.labeled:
            out.setdefault(lab.det.class_id, []).append(lab)
        for labs in out.values():
            labs.sort(key=lambda l: det_key(l.det))
        return out

    def counts(self, class_id):
        labs = [l for l in self.labeled if l.det.class_id == class_id]
        tp = sum(l.tp for l in labs)
        return tp, len(labs) - tp, self.fn.get(class_id, 0)


def det_key(d):
    """Ordering from detection content only, so input order never matters."""
    return (-d.score, d.image_id, d.class_id, d.box.corners())


def _match_image(dets, gts, thr):
    out = []
    matched = np.zeros(len(gts), dtype=bool)
    cls = np.array([g.class_id for g in gts], dtype=np.int64)
    corners = np.array([g.box.corners() for g in gts]).reshape(-1, 4)
    for d in sorted(dets, key=det_key):
        cand = np.flatnonzero((cls == d.class_id) & ~matched)
        best = None
        if len(cand):
            ious = iou_matrix(np.array([d.box.corners()]), corners[cand])[0]
            j = int(np.argmax(ious))  # first max, i.e. lowest gt index on ties
            if ious[j] >= thr:
                best = int(cand[j])
        if best is None:
            out.append(Labeled(d, False))
        else:
            matched[best] = True
            out.append(Labeled(d, True, (d.image_id, best)))
    return out, matched


def match_detections(dets, gts, cfg=MatchConfig(), threads=1):
    """Label every detection TP/FP and count missed ground truths per class.

    ``gts`` maps image id to a list of :class:`GroundTruth`. A detection whose
    image id is absent from ``gts`` raises :class:`DataConsistencyError`.
    """
    per_image = {}
    for d in dets:
        if d.image_id not in gts:
            raise DataConsistencyError(f"detection refers to unknown image {d.image_id!r}")
        per_image.setdefault(d.image_id, []).append(d)
    images = sorted(gts)

    def work(img):
        return _match_image(per_image.get(img, []), gts[img], cfg.iou_threshold)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(work, images))
    else:
        results = [work(img) for img in images]

    labeled, gt_counts, fn = [], {}, {}
    for img, (labs, matched) in zip(images, results):
        labeled += labs
        for g, m in zip(gts[img], matched):
            gt_counts[g.class_id] = gt_counts.get(g.class_id, 0) + 1
            if not m:
                fn[g.class_id] = fn.get(g.class_id, 0) + 1
    labeled.sort(key=lambda l: det_key(l.det))
    return MatchResult(labeled, gt_counts, fn)


def precision_recall(tp, fp, fn):
    """``(TP/(TP+FP), TP/(TP+FN))``, each 0 when its denominator is 0."""
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return p, r


def f1(p, r):
    return 2 * p * r / (p + r) if p + r else 0.0


def pr_curve(labels, n_gt):
    """``(recall, precision)`` after each detection prefix.

    ``labels`` are TP flags (or :class:`Labeled` items) in descending score order.
    """
    out = []
    tp = fp = 0
    for lab in labels:
        if bool(lab.tp if isinstance(lab, Labeled) else lab):
            tp += 1
        else:
            fp += 1
        out.append((tp / n_gt if n_gt else 0.0, tp / (tp + fp)))
    return out


def average_precision(curve):
    """Area under the precision envelope ``p_env(r) = max{p_k : r_k >= r}``.

    The recall axis is split at the curve's recall values and the envelope is
    constant on each piece; the sum is exact and rounded once at the end.
    """
    if not curve:
        return 0.0
    total = Fraction(0)
    env = Fraction(0)
    # sweep from the highest recall down, carrying the running max precision
    pts = sorted(((Fraction(r), Fraction(p)) for r, p in curve), key=lambda t: t[0])
    right = pts[-1][0]
    i = len(pts) - 1
    while i >= 0:
        r = pts[i][0]
        total += env * (right - r)
        while i >= 0 and pts[i][0] == r:
            env = max(env, pts[i][1])
            i -= 1
        right = r
    total += env * right
    return float(total)


def mean_ap(aps):
    """Unweighted mean over classes. ``None`` entries (absent classes) are skipped."""
    vals = [a for a in aps if a is not None]
    if not vals:
        raise ValueError("mean_ap needs at least one class with an AP")
    return math.fsum(vals) / len(vals)


def class_aps(result, classes):
    """AP per class id; ``None`` for classes with no ground truth."""
    groups = result.by_class()
    out = {}
    for c in classes:
        n = result.gt_counts.get(c, 0)
        out[c] = average_precision(pr_curve(groups.get(c, []), n)) if n else None
    return out


def _map_or_none(aps):
    vals = [a for a in aps if a is not None]
    return mean_ap(vals) if vals else None


def ap_range(dets, gts, thresholds=COCO_THRESHOLDS, classes=None, threads=1):
    """mAP at each IoU threshold and their mean (AP50:95 for the default range)."""
    classes = _classes(gts, classes)
    per = {}
    for t in thresholds:
        res = match_detections(dets, gts, MatchConfig(t), threads)
        m = _map_or_none(class_aps(res, classes).values())
        per[t] = 0.0 if m is None else m
    return {
        "ap": math.fsum(per.values()) / len(per),
        "ap50": per.get(0.5),
        "ap75": per.get(0.75),
        "per_threshold": per,
    }


def ap_by_size(dets, gts, cfg=MatchConfig(), classes=None, threads=1):
    """``{"small": AP_S, "medium": AP_M, "large": AP_L}``; ``None`` for empty buckets.

    Matching runs once on all ground truths. For each bucket, only ground truths
    in that bucket count; detections matched to other buckets' ground truths are
    dropped, unmatched detections stay as false positives.
    """
    classes = _classes(gts, classes)
    res = match_detections(dets, gts, cfg, threads)
    bucket_of = {
        (img, i): cfg.bucket(g.box.area) for img, items in gts.items() for i, g in enumerate(items)
    }
    groups = res.by_class()
    out = {}
    for name in ("small", "medium", "large"):
        aps = []
        for c in classes:
            n = sum(
                1
                for img, items in gts.items()
                for i, g in enumerate(items)
                if g.class_id == c and bucket_of[(img, i)] == name
            )
            if not n:
                continue
            labs = [l for l in groups.get(c, []) if not l.tp or bucket_of[l.gt] == name]
            aps.append(average_precision(pr_curve(labs, n)))
        out[name] = mean_ap(aps) if aps else None
    return out


def _classes(gts, classes):
    if classes is not None:
        return list(classes)
    return sorted({g.class_id for items in gts.values() for g in items})


# ---------------------------------------------------------------------------
# report


@dataclass
class ClassStats:
    class_id: int
    name: str
    gt: int
    tp: int
    fp: int
    fn: int
    ap: float = None
    curve: list = field(default_factory=list)

    @property
    def precision(self):
        return precision_recall(self.tp, self.fp, self.fn)[0]

    @property
    def recall(self):
        return precision_recall(self.tp, self.fp, self.fn)[1]

    @property
    def f1(self):
        return f1(self.precision, self.recall)

    def to_dict(self):
        return {
            "class_id": self.class_id,
            "name": self.name,
            "gt": self.gt,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "ap": self.ap,
        }


@dataclass
class EvalReport:
    iou_threshold: float
    classes: list
    map: float = None
    excluded: list = field(default_factory=list)
    ap_range: dict = None
    ap_by_size: dict = None

    @property
    def overall(self):
        tp = sum(c.tp for c in self.classes)
        fp = sum(c.fp for c in self.classes)
        fn = sum(c.fn for c in self.classes)
        p, r = precision_recall(tp, fp, fn)
        return {
            "gt": sum(c.gt for c in self.classes),
            "tp": tp,
            "fp": fp,
            "fn": fn,
            "precision": p,
            "recall": r,
            "f1": f1(p, r),
            "map": self.map,
            "excluded_classes": list(self.excluded),
        }

    def to_dict(self):
        out = {
            "iou_threshold": self.iou_threshold,
            "classes": [c.to_dict() for c in self.classes],
            "overall": self.overall,
        }
        if self.ap_range is not None:
            out["ap_range"] = {
                "ap50_95": self.ap_range["ap"],
                "ap50": self.ap_range["ap50"],
                "ap75": self.ap_range["ap75"],
                "per_threshold": {f"{t:.2f}": v for t, v in self.ap_range["per_threshold"].items()},
            }
        if self.ap_by_size is not None:
            out["ap_by_size"] = dict(self.ap_by_size)
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self):
        def pct(v):
            return "   -  " if v is None else f"{100 * v:6.2f}"

        head = f"{'class':<16} {'GT':>7} {'TP':>7} {'FP':>7} {'FN':>7} {'P%':>6} {'R%':>6} {'F1%':>6} {'AP%':>6}"
        lines = [head, "-" * len(head)]
        for c in self.classes:
            lines.append(
                f"{c.name:<16} {c.gt:>7} {c.tp:>7} {c.fp:>7} {c.fn:>7} "
                f"{pct(c.precision)} {pct(c.recall)} {pct(c.f1)} {pct(c.ap)}"
            )
        o = self.overall
        lines.append("-" * len(head))
        lines.append(
            f"{'all':<16} {o['gt']:>7} {o['tp']:>7} {o['fp']:>7} {o['fn']:>7} "
            f"{pct(o['precision'])} {pct(o['recall'])} {pct(o['f1'])} {pct(self.map)}"
        )
        if self.excluded:
            lines.append("excluded from mAP (no ground truth): " + ", ".join(self.excluded))
        if self.ap_range is not None:
            r = self.ap_range
            lines.append(f"AP50:95 {pct(r['ap'])}  AP50 {pct(r['ap50'])}  AP75 {pct(r['ap75'])}")
        if self.ap_by_size is not None:
            s = self.ap_by_size
            lines.append(f"AP_S {pct(s['small'])}  AP_M {pct(s['medium'])}  AP_L {pct(s['large'])}")
        return "\n".join(lines)

    def curves_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "rank", "recall", "precision"])
        for c in self.classes:
            for k, (r, p) in enumerate(c.curve):
                w.writerow([c.name, k + 1, f"{r:.6f}", f"{p:.6f}"])
        return buf.getvalue()


def evaluate(dets, gts, class_names=None, cfg=MatchConfig(), with_range=False, with_sizes=False, threads=1):
    """Full evaluation. ``class_names[i]`` names class id ``i``."""
    ids = _classes(gts, None)
    ids = sorted(set(ids) | {d.class_id for d in dets})
    if class_names is not None:
        ids = sorted(set(ids) | set(range(len(class_names))))

    def name(c):
        return class_names[c] if class_names is not None and c < len(class_names) else str(c)

    res = match_detections(dets, gts, cfg, threads)
    groups = res.by_class()
    stats, excluded = [], []
    for c in ids:
        n = res.gt_counts.get(c, 0)
        labs = groups.get(c, [])
        tp = sum(l.tp for l in labs)
        curve = pr_curve(labs, n)
        ap = average_precision(curve) if n else None
        if ap is None:
            excluded.append(name(c))
        stats.append(ClassStats(c, name(c), n, tp, len(labs) - tp, res.fn.get(c, 0), ap, curve))
    report = EvalReport(cfg.iou_threshold, stats, _map_or_none(s.ap for s in stats), excluded)
    if with_range:
        report.ap_range = ap_range(dets, gts, classes=ids, threads=threads)
    if with_sizes:
        report.ap_by_size = ap_by_size(dets, gts, cfg, classes=ids, threads=threads)
    return report
