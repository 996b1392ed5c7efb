"""Walk a predicted box toward its target and watch the three losses fall."""

import numpy as np

from fgdet.boxes import BoundingBox, ciou_grad, ciou_loss, diou_loss, giou_loss

gt = BoundingBox.from_corners(40, 40, 80, 100)
pred = BoundingBox.from_corners(0, 0, 30, 30)

print(f"{'step':>4} {'GIoU':>8} {'DIoU':>8} {'CIoU':>8}")
for step in range(0, 401):
    if step % 50 == 0:
        print(f"{step:4d} {giou_loss(pred, gt):8.4f} {diou_loss(pred, gt):8.4f} {ciou_loss(pred, gt):8.4f}")
    g = np.asarray(ciou_grad(pred, gt))
    x, y, w, h = np.array([pred.cx, pred.cy, pred.w, pred.h]) - 300.0 / (1 + step / 20) * g  # decaying step
    pred = BoundingBox(x, y, max(w, 1e-3), max(h, 1e-3))
print("final box corners:", np.round(pred.corners(), 2))
