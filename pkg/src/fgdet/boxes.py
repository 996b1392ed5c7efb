"""Axis-aligned box geometry: IoU, the GIoU/DIoU/CIoU losses and their gradients.

Boxes are stored in center form ``(cx, cy, w, h)``. Gradients are taken with
respect to the predicted box's ``(cx, cy, w, h)`` and returned as a length-4
numpy array. They are exact almost everywhere; at configurations where a
predicted edge coincides with a ground-truth edge the loss has a kink and the
returned value is one of the one-sided derivatives.
"""

import math
from dataclasses import dataclass

import numpy as np

from fgdet.activations import sigmoid
from fgdet.errors import FgdetError

_V_SCALE = 4.0 / math.pi**2


class DegenerateBoxError(FgdetError, ValueError):
    """A loss was requested for a pair it is undefined on."""


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.w >= 0 and self.h >= 0):
            raise ValueError(f"box extents must be non-negative, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1, y1, x2, y2):
        if x2 < x1 or y2 < y1:
            raise ValueError(f"corner box needs x1 <= x2 and y1 <= y2, got {(x1, y1, x2, y2)}")
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    @property
    def x1(self):
        return self.cx - self.w / 2.0

    @property
    def y1(self):
        return self.cy - self.h / 2.0

    @property
    def x2(self):
        return self.cx + self.w / 2.0

    @property
    def y2(self):
        return self.cy + self.h / 2.0

    @property
    def area(self):
        return self.w * self.h

    def corners(self):
        return (self.x1, self.y1, self.x2, self.y2)

    def scaled(self, s):
        return BoundingBox(self.cx * s, self.cy * s, self.w * s, self.h * s)

    def translated(self, dx, dy):
        return BoundingBox(self.cx + dx, self.cy + dy, self.w, self.h)


@dataclass(frozen=True)
class DecodeContext:
    """Grid cell origin, anchor prior (grid units), grid size and pixel stride."""

    cell: tuple
    prior: tuple
    grid_size: int = 1
    stride: float = 1.0

    def __post_init__(self):
        cx, cy = self.cell
        if not (0 <= cx < self.grid_size and 0 <= cy < self.grid_size):
            raise ValueError(f"cell {self.cell} outside a {self.grid_size}x{self.grid_size} grid")
        if not (self.prior[0] > 0 and self.prior[1] > 0):
            raise ValueError(f"anchor prior must be positive, got {self.prior}")


class _Pair:
    """Shared intermediate quantities for one (pred, gt) pair.

    Derivatives are with respect to pred corners ``(x1, y1, x2, y2)``.
    """

    def __init__(self, pred, gt):
        p = np.array(pred.corners())
        g = np.array(gt.corners())
        self.p, self.g = p, g
        pw, ph = p[2] - p[0], p[3] - p[1]
        gw, gh = g[2] - g[0], g[3] - g[1]

        ix1, iy1 = max(p[0], g[0]), max(p[1], g[1])
        ix2, iy2 = min(p[2], g[2]), min(p[3], g[3])
        iw, ih = ix2 - ix1, iy2 - iy1
        if iw > 0 and ih > 0:
            self.inter = iw * ih
            diw = np.array([-float(p[0] > g[0]), 0.0, float(p[2] < g[2]), 0.0])
            dih = np.array([0.0, -float(p[1] > g[1]), 0.0, float(p[3] < g[3])])
            self.d_inter = diw * ih + dih * iw
        else:
            self.inter = 0.0
            self.d_inter = np.zeros(4)

        self.area_p = pw * ph
        self.area_g = gw * gh
        d_area = np.array([-ph, -pw, ph, pw])
        self.union = _union(self.area_p, self.area_g, self.inter)
        d_union = d_area - self.d_inter
        if self.union > 0 and self.area_p > 0 and self.area_g > 0:
            self.iou = self.inter / self.union
            self.d_iou = (self.d_inter * self.union - self.inter * d_union) / self.union**2
        else:
            self.iou = 0.0
            self.d_iou = np.zeros(4)
        self.d_union = d_union

        ex1, ey1 = min(p[0], g[0]), min(p[1], g[1])
        ex2, ey2 = max(p[2], g[2]), max(p[3], g[3])
        self.cw, self.ch = ex2 - ex1, ey2 - ey1
        self.d_cw = np.array([-float(p[0] < g[0]), 0.0, float(p[2] > g[2]), 0.0])
        self.d_ch = np.array([0.0, -float(p[1] < g[1]), 0.0, float(p[3] > g[3])])

    @property
    def hull_area(self):
        return self.cw * self.ch

    @property
    def d_hull_area(self):
        return self.d_cw * self.ch + self.d_ch * self.cw

    @property
    def diag2(self):
        return self.cw**2 + self.ch**2

    @property
    def d_diag2(self):
        return 2.0 * (self.cw * self.d_cw + self.ch * self.d_ch)

    def center_dist2(self, pred, gt):
        return (pred.cx - gt.cx) ** 2 + (pred.cy - gt.cy) ** 2

    def d_center_dist2(self, pred, gt):
        dx, dy = pred.cx - gt.cx, pred.cy - gt.cy
        # d(cx)/dx1 = d(cx)/dx2 = 1/2
        return np.array([dx, dy, dx, dy])


def _union(area_a, area_b, inter):
    # nested boxes: return the outer area exactly rather than a + b - a
    if inter >= area_a:
        return area_b
    if inter >= area_b:
        return area_a
    return area_a + area_b - inter


def _to_center_grad(d):
    """Chain a corner gradient (x1, y1, x2, y2) to (cx, cy, w, h)."""
    return np.array([d[0] + d[2], d[1] + d[3], 0.5 * (d[2] - d[0]), 0.5 * (d[3] - d[1])])


def _check_pair(pred, gt):
    if pred.area <= 0 and gt.area <= 0:
        raise DegenerateBoxError("both boxes have zero area; loss is undefined")


def iou(a, b):
    """Intersection over union. Zero-area boxes have IoU 0 with everything."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    # areas from corners so identical boxes give exactly 1
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    if iw <= 0 or ih <= 0 or area_a <= 0 or area_b <= 0:
        return 0.0
    inter = iw * ih
    return inter / _union(area_a, area_b, inter)


def giou_loss(pred, gt):
    """``1 - IoU + (|C| - |union|) / |C|`` with C the enclosing box."""
    _check_pair(pred, gt)
    q = _Pair(pred, gt)
    c = q.hull_area
    return 1.0 - q.iou + (c - q.union) / c


def giou_grad(pred, gt):
    _check_pair(pred, gt)
    q = _Pair(pred, gt)
    c, dc = q.hull_area, q.d_hull_area
    # (c - u)/c = 1 - u/c
    d = -q.d_iou - (q.d_union * c - q.union * dc) / c**2
    return _to_center_grad(d)


def diou_loss(pred, gt):
    """``1 - IoU + rho^2 / c^2``: squared center distance over squared hull diagonal."""
    _check_pair(pred, gt)
    q = _Pair(pred, gt)
    return 1.0 - q.iou + q.center_dist2(pred, gt) / q.diag2


def _diou_corner_grad(q, pred, gt):
    r2, c2 = q.center_dist2(pred, gt), q.diag2
    return -q.d_iou + (q.d_center_dist2(pred, gt) * c2 - r2 * q.d_diag2) / c2**2


def diou_grad(pred, gt):
    _check_pair(pred, gt)
    q = _Pair(pred, gt)
    return _to_center_grad(_diou_corner_grad(q, pred, gt))


def _check_ciou(pred, gt):
    if pred.h <= 0 or gt.h <= 0 or pred.w <= 0 or gt.w <= 0:
        raise DegenerateBoxError(
            f"CIoU needs positive extents, got pred {pred.w}x{pred.h}, gt {gt.w}x{gt.h}"
        )


def aspect_term(pred, gt):
    """Aspect-ratio consistency ``v = 4/pi^2 * (atan(w_gt/h_gt) - atan(w/h))^2``."""
    return _V_SCALE * (math.atan(gt.w / gt.h) - math.atan(pred.w / pred.h)) ** 2


def ciou_alpha(pred, gt):
    """Trade-off weight ``v / ((1 - IoU) + v)``; 0 when the denominator vanishes."""
    _check_ciou(pred, gt)
    v = aspect_term(pred, gt)
    denom = (1.0 - iou(pred, gt)) + v
    return v / denom if denom > 0 else 0.0


def ciou_loss(pred, gt, alpha=None):
    """DIoU loss plus ``alpha * v``.

    ``alpha`` defaults to :func:`ciou_alpha`; pass a number to hold it fixed,
    which is how :func:`ciou_grad` treats it.
    """
    _check_ciou(pred, gt)
    if alpha is None:
        alpha = ciou_alpha(pred, gt)
    return diou_loss(pred, gt) + alpha * aspect_term(pred, gt)


def ciou_grad(pred, gt):
    """Gradient of :func:`ciou_loss` with alpha held constant."""
    _check_ciou(pred, gt)
    q = _Pair(pred, gt)
    d = _to_center_grad(_diou_corner_grad(q, pred, gt))
    alpha = ciou_alpha(pred, gt)
    diff = math.atan(gt.w / gt.h) - math.atan(pred.w / pred.h)
    r = pred.w**2 + pred.h**2
    # d atan(w/h)/dw = h/(w^2+h^2), d/dh = -w/(w^2+h^2)
    d[2] += alpha * _V_SCALE * 2.0 * diff * (-pred.h / r)
    d[3] += alpha * _V_SCALE * 2.0 * diff * (pred.w / r)
    return d


LOSSES = {
    "iou": lambda p, g: 1.0 - iou(p, g),
    "giou": giou_loss,
    "diou": diou_loss,
    "ciou": ciou_loss,
}

GRADS = {"giou": giou_grad, "diou": diou_grad, "ciou": ciou_grad}


def decode_box(offsets, ctx):
    """Decode raw ``(tx, ty, tw, th)`` into a box in grid units.

    The center is ``sigmoid(t) + cell`` and is kept strictly inside the cell even
    when the sigmoid saturates in floating point.
    """
    tx, ty, tw, th = (float(t) for t in offsets)
    if not all(math.isfinite(t) for t in (tx, ty, tw, th)):
        raise ValueError(f"offsets must be finite, got {offsets}")
    cx = _inside(ctx.cell[0], sigmoid(tx))
    cy = _inside(ctx.cell[1], sigmoid(ty))
    return BoundingBox(cx, cy, ctx.prior[0] * math.exp(tw), ctx.prior[1] * math.exp(th))


def _inside(c, s):
    b = c + s
    if b <= c:
        return math.nextafter(float(c), c + 1.0)
    if b >= c + 1:
        return math.nextafter(float(c + 1), c)
    return b


def confidence(objectness, iou_pred_truth):
    """Training-target confidence: objectness (0 or 1) times IoU with the truth."""
    if objectness not in (0, 1):
        raise ValueError(f"objectness must be 0 or 1, got {objectness}")
    if not 0.0 <= iou_pred_truth <= 1.0:
        raise ValueError(f"IoU must lie in [0, 1], got {iou_pred_truth}")
    return float(objectness) * float(iou_pred_truth)


def iou_matrix(a, b):
    """Pairwise IoU between corner arrays ``a`` (N, 4) and ``b`` (M, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    a_, b_ = area_a[:, None], area_b[None, :]
    # same nested-box rule as the scalar iou
    union = np.where(inter >= a_, b_, np.where(inter >= b_, a_, a_ + b_ - inter))
    valid = (area_a[:, None] > 0) & (area_b[None, :] > 0) & (union > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(valid, inter / np.where(union > 0, union, 1.0), 0.0)
