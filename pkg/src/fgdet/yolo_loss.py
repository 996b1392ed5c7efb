"""Composite detection loss over an N x N x B prediction grid.

    total = coordinate term + confidence term + classification term

The coordinate term is either the squared error on (x, y, w, h) or an IoU-family
box loss, chosen by ``LossWeights.box_term``. Non-responsible slots contribute
to the confidence term with target 0, weighted by ``kappa_nb``.
"""

from dataclasses import dataclass

import numpy as np

from fgdet import boxes
from fgdet.boxes import BoundingBox
from fgdet.errors import ShapeError

BOX_TERMS = ("squared", "giou", "diou", "ciou")


@dataclass(frozen=True)
class LossWeights:
    kappa_cor: float = 5.0
    kappa_nb: float = 0.5
    box_term: str = "ciou"

    def __post_init__(self):
        if self.box_term not in BOX_TERMS:
            raise ValueError(f"box_term must be one of {BOX_TERMS}, got {self.box_term!r}")
        for name in ("kappa_cor", "kappa_nb"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class GridPrediction:
    """Predicted boxes ``(N, N, B, 4)`` as (x, y, w, h), confidences ``(N, N, B)``
    and class probabilities ``(N, N, B, C)``."""

    boxes: np.ndarray
    conf: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        _init_grid(self)
        for name in ("conf", "probs"):
            a = getattr(self, name)
            if np.any((a < 0) | (a > 1)):
                raise ValueError(f"{name} entries must lie in [0, 1]")

    @property
    def grid_n(self):
        return self.boxes.shape[0]

    @property
    def boxes_per_cell(self):
        return self.boxes.shape[2]


@dataclass(frozen=True)
class GridTarget:
    """Responsibility mask ``(N, N, B)`` plus true boxes, confidences and one-hot classes.

    Entries of ``boxes``/``conf``/``probs`` at slots where ``mask`` is 0 are ignored.
    """

    mask: np.ndarray
    boxes: np.ndarray
    conf: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask)
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask must be binary")
        object.__setattr__(self, "mask", m.astype(bool))
        _init_grid(self)
        if self.mask.shape != self.conf.shape:
            raise ShapeError(
                f"mask {self.mask.shape} vs conf {self.conf.shape}", ("mask", "conf")
            )
        wh = self.boxes[..., 2:][self.mask]
        if np.any(wh <= 0):
            raise ValueError("responsible target boxes need positive extents")

    @property
    def grid_n(self):
        return self.boxes.shape[0]


def _init_grid(obj):
    for name in ("boxes", "conf", "probs"):
        object.__setattr__(obj, name, np.asarray(getattr(obj, name), dtype=np.float64))
    b, c, p = obj.boxes, obj.conf, obj.probs
    if b.ndim != 4 or b.shape[0] != b.shape[1] or b.shape[3] != 4:
        raise ShapeError(f"boxes must be N x N x B x 4, got {b.shape}", ("boxes",))
    if c.shape != b.shape[:3]:
        raise ShapeError(f"conf {c.shape} does not match boxes {b.shape[:3]}", ("conf", "boxes"))
    if p.ndim != 4 or p.shape[:3] != b.shape[:3]:
        raise ShapeError(f"probs {p.shape} does not match boxes {b.shape[:3]}", ("probs", "boxes"))


def _check(pred, tgt):
    if pred.boxes.shape != tgt.boxes.shape:
        raise ShapeError(
            f"prediction grid {pred.boxes.shape[:3]} vs target grid {tgt.boxes.shape[:3]}",
            ("pred.grid", "tgt.grid"),
        )


def coord_error(pred, tgt, weights=LossWeights()):
    """Coordinate term, summed over responsible slots only."""
    _check(pred, tgt)
    m = tgt.mask
    if weights.box_term == "squared":
        diff = tgt.boxes[m] - pred.boxes[m]
        return float(weights.kappa_cor * np.sum(diff**2))
    loss = boxes.LOSSES[weights.box_term]
    total = 0.0
    for p, t in zip(pred.boxes[m], tgt.boxes[m]):
        total += loss(BoundingBox(*p), BoundingBox(*t))
    return float(weights.kappa_cor * total)


def iou_error(pred, tgt, weights=LossWeights()):
    """Confidence term: squared error on responsible slots plus ``kappa_nb`` times
    the squared predicted confidence on every other slot."""
    _check(pred, tgt)
    m = tgt.mask
    obj = np.sum((tgt.conf[m] - pred.conf[m]) ** 2)
    noobj = np.sum(pred.conf[~m] ** 2)
    return float(obj + weights.kappa_nb * noobj)


def class_error(pred, tgt):
    _check(pred, tgt)
    if pred.probs.shape[3] != tgt.probs.shape[3]:
        raise ShapeError(
            f"{pred.probs.shape[3]} predicted classes vs {tgt.probs.shape[3]} target classes",
            ("pred.classes", "tgt.classes"),
        )
    m = tgt.mask
    return float(np.sum((tgt.probs[m] - pred.probs[m]) ** 2))


def total_loss(pred, tgt, weights=LossWeights()):
    """Return ``(total, (coord, conf, cls))`` where total is the plain sum."""
    parts = (coord_error(pred, tgt, weights), iou_error(pred, tgt, weights), class_error(pred, tgt))
    return parts[0] + parts[1] + parts[2], parts
