"""Build a tiny VOC dataset, expand it with the default ops, and list the outputs."""

import json
import sys
import tempfile
from pathlib import Path

import numpy as np

from fgdet import dataio

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
src = root / "src"
src.mkdir(parents=True, exist_ok=True)
rng = np.random.default_rng(1)
manifest = {}
for i in range(3):
    stem = f"leaf{i}"
    dataio.write_ppm(dataio.ImageBuffer(rng.integers(0, 256, (48, 64, 3), dtype=np.uint8)), src / f"{stem}.ppm")
    ann = dataio.Annotation(f"{stem}.ppm", 64, 48, 3, (dataio.VocObject("leaf_mold", 5, 8, 30, 40),))
    (src / f"{stem}.xml").write_bytes(dataio.write_voc_xml(ann))
    manifest[stem] = {"image": f"{stem}.ppm", "annotation": f"{stem}.xml"}
(src / "manifest.json").write_text(json.dumps(manifest))

items = dataio.read_manifest(src / "manifest.json")
res = dataio.expand_dataset(items, dataio.DEFAULT_OPS, root / "out")
print(f"{len(items)} items -> {len(res)} outputs in {root / 'out'}")
for m in res.items[:10]:
    o = dataio.read_voc(root / "out" / m.annotation).objects[0]
    print(f"  {m.id:<22} box ({o.x1}, {o.y1}, {o.x2}, {o.y2})")
