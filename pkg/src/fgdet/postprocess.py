"""Raw head maps to final detections: grid decoding, score filtering and NMS.

Score of a candidate is ``sigmoid(objectness) * max_c sigmoid(class_logit_c)``.
Class scores are independent sigmoids, not a softmax.

Ordering is deterministic everywhere: descending score, then class id, then
the candidate's ``order`` (its decode index: scale, cell row-major, anchor).
"""

import json
from dataclasses import dataclass

import numpy as np

from fgdet.activations import sigmoid
from fgdet.boxes import BoundingBox, iou_matrix
from fgdet.errors import ShapeError
from fgdet.network import DEFAULT_ANCHORS_416


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    score: float
    image_id: str = ""
    order: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")

    @property
    def sort_key(self):
        return (-self.score, self.class_id, self.order)


@dataclass(frozen=True)
class AnchorSet:
    """Per-scale anchor sizes in pixels, finest scale (stride 8) first."""

    scales: tuple = DEFAULT_ANCHORS_416

    def __post_init__(self):
        scales = tuple(tuple((float(w), float(h)) for w, h in s) for s in self.scales)
        object.__setattr__(self, "scales", scales)
        if len(scales) != 3:
            raise ValueError(f"need anchors for exactly 3 scales, got {len(scales)}")
        if len({len(s) for s in scales}) != 1:
            raise ValueError("every scale needs the same number of anchors")
        if any(w <= 0 or h <= 0 for s in scales for w, h in s):
            raise ValueError("anchor sizes must be positive")

    @property
    def num_anchors(self):
        return len(self.scales[0])

    @classmethod
    def default(cls, input_size=416):
        f = input_size / 416.0
        return cls(tuple(tuple((w * f, h * f) for w, h in s) for s in DEFAULT_ANCHORS_416))


def decode_head(head, anchors, stride, image_id="", order_offset=0):
    """One candidate per (cell, anchor) of an ``N x N x B*(5+C)`` head map.

    ``anchors`` are ``(w, h)`` pixel pairs for this scale; boxes come out in pixels.
    """
    head = np.asarray(head, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    b = len(anchors)
    if head.ndim != 3 or head.shape[2] % b or head.shape[2] // b < 6:
        raise ShapeError(
            f"head depth {head.shape[-1]} is not {b} x (5 + classes)", ("head.C", "anchors")
        )
    ny, nx = head.shape[:2]
    t = head.reshape(ny, nx, b, -1)
    cy, cx = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    bx = (sigmoid(t[..., 0]) + cx[..., None]) * stride
    by = (sigmoid(t[..., 1]) + cy[..., None]) * stride
    bw = anchors[:, 0] * np.exp(t[..., 2])
    bh = anchors[:, 1] * np.exp(t[..., 3])
    cls = sigmoid(t[..., 5:])
    cls_id = np.argmax(cls, axis=-1)
    score = sigmoid(t[..., 4]) * np.take_along_axis(cls, cls_id[..., None], -1)[..., 0]
    out = []
    for k, (i, j, a) in enumerate(np.ndindex(ny, nx, b)):
        out.append(
            Detection(
                BoundingBox(bx[i, j, a], by[i, j, a], bw[i, j, a], bh[i, j, a]),
                int(cls_id[i, j, a]),
                float(min(1.0, score[i, j, a])),
                image_id,
                order_offset + k,
            )
        )
    return out


def decode_heads(heads, anchor_set, input_size, image_id=""):
    """Decode all three scales; ``heads`` are ordered finest first."""
    out = []
    for head, anchors in zip(heads, anchor_set.scales):
        stride = input_size / head.shape[0]
        out += decode_head(head, anchors, stride, image_id, order_offset=len(out))
    return out


def filter_confidence(cands, threshold):
    """Keep candidates with ``score >= threshold``, sorted by :attr:`Detection.sort_key`."""
    return sorted((d for d in cands if d.score >= threshold), key=lambda d: d.sort_key)


def nms(dets, iou_threshold=0.5):
    """Greedy per-class suppression of detections with IoU above the threshold."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    dets = sorted(dets, key=lambda d: d.sort_key)
    keep = []
    by_class = {}
    for i, d in enumerate(dets):
        by_class.setdefault((d.image_id, d.class_id), []).append(i)
    for idx in by_class.values():
        corners = np.array([dets[i].box.corners() for i in idx])
        ious = iou_matrix(corners, corners)
        alive = np.ones(len(idx), dtype=bool)
        for a in range(len(idx)):
            if not alive[a]:
                continue
            keep.append(idx[a])
            alive[a + 1 :] &= ~(ious[a, a + 1 :] > iou_threshold)
    return [dets[i] for i in sorted(keep)]


# ---------------------------------------------------------------------------
# detection files


def format_line(d):
    x1, y1, x2, y2 = d.box.corners()
    return f"{d.image_id} {d.class_id} {d.score:.6f} {x1:.6f} {y1:.6f} {x2:.6f} {y2:.6f}"


def to_json(dets):
    return json.dumps(
        [
            {
                "image_id": d.image_id,
                "class_id": d.class_id,
                "score": d.score,
                "box": list(d.box.corners()),
            }
            for d in dets
        ],
        indent=1,
    )


def write_detections(dets, path, fmt="text"):
    with open(path, "w") as fh:
        if fmt == "json":
            fh.write(to_json(dets) + "\n")
        else:
            fh.writelines(format_line(d) + "\n" for d in dets)


def parse_detections(text):
    """Parse either the line format or the JSON array format."""
    text = text.strip()
    out = []
    if text.startswith("["):
        for k, e in enumerate(json.loads(text)):
            out.append(
                Detection(
                    BoundingBox.from_corners(*e["box"]),
                    int(e["class_id"]),
                    float(e["score"]),
                    str(e.get("image_id", "")),
                    k,
                )
            )
        return out
    for k, line in enumerate(text.splitlines()):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) != 7:
            raise ValueError(f"line {k + 1}: expected 7 fields, got {len(parts)}")
        image_id, cls, score, *xyxy = parts
        out.append(
            Detection(
                BoundingBox.from_corners(*(float(v) for v in xyxy)),
                int(cls),
                float(score),
                image_id,
                k,
            )
        )
    return out


def read_detections(path):
    with open(path) as fh:
        return parse_detections(fh.read())
