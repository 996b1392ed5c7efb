"""Synthetic ground truth, noisy detections, then the full evaluation report."""

import numpy as np

from fgdet.boxes import BoundingBox
from fgdet.metrics import GroundTruth, evaluate
from fgdet.postprocess import Detection, nms

rng = np.random.default_rng(0)
names = ["early_blight", "late_blight", "septoria", "leaf_mold"]
gts, dets = {}, []
for i in range(20):
    image = f"leaf{i:02d}"
    gts[image] = []
    for _ in range(rng.integers(1, 5)):
        x, y = rng.uniform(0, 350, 2)
        w, h = rng.uniform(8, 120, 2)
        c = int(rng.integers(0, 4))
        gts[image].append(GroundTruth(BoundingBox.from_corners(x, y, x + w, y + h), c))
        # a few jittered copies per object; NMS should merge them
        for _ in range(3):
            jx, jy = rng.normal(0, 0.08 * w), rng.normal(0, 0.08 * h)
            box = BoundingBox.from_corners(x + jx, y + jy, x + w + jx, y + h + jy)
            dets.append(Detection(box, c, float(rng.uniform(0.3, 1.0)), image, len(dets)))
    for _ in range(rng.integers(0, 3)):
        x, y = rng.uniform(0, 380, 2)
        dets.append(Detection(BoundingBox.from_corners(x, y, x + 30, y + 30), int(rng.integers(0, 4)),
                              float(rng.uniform(0.3, 0.7)), image, len(dets)))

kept = nms(dets, 0.5)
print(f"{len(dets)} raw detections, {len(kept)} after NMS\n")
print(evaluate(kept, gts, names, with_range=True, with_sizes=True).to_text())
