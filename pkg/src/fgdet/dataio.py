"""PASCAL VOC annotations, binary PPM images, dataset splits and augmentation.

VOC files store 1-based pixel coordinates; everything in memory is 0-based
(``x_mem = x_disk - 1``). A box is a set of inclusive pixel indices, so it lies
in ``[0, W-1] x [0, H-1]`` and the mirror of column ``x`` is ``W-1-x``.
"""

import json
import math
import os
import xml.etree.ElementTree as ET
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from fgdet.errors import DataConsistencyError, FgdetError


class VocError(FgdetError, ValueError):
    pass


class MalformedXmlError(VocError):
    pass


class MissingSizeError(VocError):
    pass


class DegenerateVocBoxError(VocError):
    pass


class BoxOutOfBoundsError(VocError):
    pass


class PpmError(FgdetError, ValueError):
    pass


class ExpandError(FgdetError):
    """Raised when writing the expanded dataset fails part way through."""

    def __init__(self, message, written):
        super().__init__(f"{message} ({len(written)} files written before the failure)")
        self.written = list(written)


@dataclass(frozen=True)
class VocObject:
    name: str
    x1: int
    y1: int
    x2: int
    y2: int
    difficult: bool = False

    @property
    def corners(self):
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class Annotation:
    filename: str
    width: int
    height: int
    depth: int = 3
    objects: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        for name in ("width", "height", "depth"):
            if getattr(self, name) <= 0:
                raise VocError(f"{name} must be positive, got {getattr(self, name)}")
        for o in self.objects:
            check_box(o, self.width, self.height)


def check_box(o, width, height):
    if o.x1 >= o.x2 or o.y1 >= o.y2:
        raise DegenerateVocBoxError(f"degenerate box {o.corners} for {o.name!r}")
    if o.x1 < 0 or o.y1 < 0 or o.x2 > width - 1 or o.y2 > height - 1:
        raise BoxOutOfBoundsError(f"box {o.corners} for {o.name!r} outside {width}x{height} image")


def _text(el, tag, exc=MalformedXmlError):
    child = el.find(tag)
    if child is None or child.text is None:
        raise exc(f"missing <{tag}> in <{el.tag}>")
    return child.text.strip()


def _int(s, what):
    try:
        v = float(s)
    except ValueError:
        raise MalformedXmlError(f"{what} is not a number: {s!r}") from None
    if not v.is_integer():
        raise MalformedXmlError(f"{what} is not an integer: {s!r}")
    return int(v)


def parse_voc_xml(data):
    """Parse VOC XML bytes (or str) into an :class:`Annotation` with 0-based corners."""
    try:
        root = ET.fromstring(data)
    except ET.ParseError as e:
        raise MalformedXmlError(f"malformed XML: {e}") from None
    if root.tag != "annotation":
        raise MalformedXmlError(f"root element is <{root.tag}>, expected <annotation>")
    size = root.find("size")
    if size is None:
        raise MissingSizeError("missing <size> element")
    w = _int(_text(size, "width", MissingSizeError), "width")
    h = _int(_text(size, "height", MissingSizeError), "height")
    d = size.find("depth")
    depth = _int(d.text, "depth") if d is not None and d.text else 3
    filename = root.findtext("filename", "").strip()
    objs = []
    for el in root.findall("object"):
        bb = el.find("bndbox")
        if bb is None:
            raise MalformedXmlError("object without <bndbox>")
        # names are kept verbatim, surrounding whitespace included
        name_el = el.find("name")
        if name_el is None or name_el.text is None:
            raise MalformedXmlError("object without <name>")
        x1, y1, x2, y2 = (_int(_text(bb, t), t) - 1 for t in ("xmin", "ymin", "xmax", "ymax"))
        diff = el.findtext("difficult", "0").strip() in ("1", "true")
        objs.append(VocObject(name_el.text, x1, y1, x2, y2, diff))
    if min(w, h, depth) <= 0:
        raise MissingSizeError(f"non-positive image size {w}x{h}x{depth}")
    return Annotation(filename, w, h, depth, tuple(objs))


def write_voc_xml(ann):
    """Serialize to VOC XML bytes with 1-based coordinates."""
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = ann.filename
    size = ET.SubElement(root, "size")
    for tag, v in (("width", ann.width), ("height", ann.height), ("depth", ann.depth)):
        ET.SubElement(size, tag).text = str(v)
    for o in ann.objects:
        el = ET.SubElement(root, "object")
        ET.SubElement(el, "name").text = o.name
        ET.SubElement(el, "difficult").text = "1" if o.difficult else "0"
        bb = ET.SubElement(el, "bndbox")
        for tag, v in zip(("xmin", "ymin", "xmax", "ymax"), o.corners):
            ET.SubElement(bb, tag).text = str(v + 1)
    ET.indent(root, "  ")
    return ET.tostring(root, encoding="utf-8") + b"\n"


def read_voc(path):
    return parse_voc_xml(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# images


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """8-bit RGB image, ``pixels`` has shape ``(height, width, 3)``."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(self.pixels)
        if p.dtype != np.uint8 or p.ndim != 3 or p.shape[2] != 3 or 0 in p.shape:
            raise ValueError(f"expected a non-empty H x W x 3 uint8 array, got {p.dtype} {p.shape}")
        p = p.copy()
        p.flags.writeable = False
        object.__setattr__(self, "pixels", p)

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]

    def __eq__(self, other):
        return isinstance(other, ImageBuffer) and np.array_equal(self.pixels, other.pixels)


def encode_ppm(img):
    return f"P6\n{img.width} {img.height}\n255\n".encode() + img.pixels.tobytes()


def decode_ppm(data):
    """Decode binary PPM (P6, maxval 255). Header comments are skipped."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PpmError("truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise PpmError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PpmError("non-numeric PPM header field") from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise PpmError(f"unsupported PPM header {w}x{h} maxval {maxval}")
    body = data[pos + 1 :]
    if len(body) != w * h * 3:
        raise PpmError(f"PPM body has {len(body)} bytes, expected {w * h * 3}")
    return ImageBuffer(np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3))


def read_ppm(path):
    return decode_ppm(Path(path).read_bytes())


def write_ppm(img, path):
    Path(path).write_bytes(encode_ppm(img))


# ---------------------------------------------------------------------------
# splits


def split_dataset(items, ratios=(0.7, 0.15, 0.15), seed=0):
    """Shuffle with ``seed`` and cut into (train, val, test).

    val and test get ``floor(n * ratio)`` items; the remainder goes to train.
    """
    items = list(items)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"need three positive ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(items)
    # the epsilon absorbs products like 12000 * 0.15 landing just under an integer
    n_val = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    n_train = n - n_val - n_test
    perm = np.random.default_rng(seed).permutation(n)
    picked = [items[i] for i in perm]
    return picked[:n_train], picked[n_train : n_train + n_val], picked[n_train + n_val :]


# ---------------------------------------------------------------------------
# augmentation


def _check_dims(img, ann):
    if (img.width, img.height) != (ann.width, ann.height):
        raise DataConsistencyError(
            f"image is {img.width}x{img.height} but annotation says {ann.width}x{ann.height}"
        )


def _scale_channels(img, gains):
    out = np.rint(img.pixels.astype(np.float64) * np.asarray(gains, dtype=np.float64))
    return ImageBuffer(np.clip(out, 0, 255).astype(np.uint8))


def _check_gain(v, what):
    if not 0 < v <= 4:
        raise ValueError(f"{what} must lie in (0, 4], got {v}")


@dataclass(frozen=True)
class Rotate90ACW:
    k: int = 1

    def __post_init__(self):
        if self.k not in (1, 2, 3):
            raise ValueError(f"k must be 1, 2 or 3, got {self.k}")

    @property
    def tag(self):
        return f"rot{90 * self.k}"

    def apply(self, img, ann):
        _check_dims(img, ann)
        for _ in range(self.k):
            w = ann.width
            # (x, y) -> (y, W-1-x)
            objs = [replace(o, x1=o.y1, y1=w - 1 - o.x2, x2=o.y2, y2=w - 1 - o.x1) for o in ann.objects]
            ann = replace(ann, width=ann.height, height=w, objects=tuple(objs))
        return ImageBuffer(np.rot90(img.pixels, self.k)), ann


@dataclass(frozen=True)
class MirrorHorizontal:
    tag = "mirror"

    def apply(self, img, ann):
        _check_dims(img, ann)
        w = ann.width
        objs = [replace(o, x1=w - 1 - o.x2, x2=w - 1 - o.x1) for o in ann.objects]
        return ImageBuffer(img.pixels[:, ::-1]), replace(ann, objects=tuple(objs))


@dataclass(frozen=True)
class Brightness:
    factor: float = 0.8

    def __post_init__(self):
        _check_gain(self.factor, "brightness factor")

    @property
    def tag(self):
        return f"bright{round(self.factor * 100):03d}"

    def apply(self, img, ann):
        _check_dims(img, ann)
        return _scale_channels(img, (self.factor,) * 3), ann


@dataclass(frozen=True)
class ColorBalance:
    r: float = 1.1
    g: float = 1.0
    b: float = 0.9

    def __post_init__(self):
        for name in ("r", "g", "b"):
            _check_gain(getattr(self, name), f"{name} gain")

    tag = "colorbal"

    def apply(self, img, ann):
        _check_dims(img, ann)
        return _scale_channels(img, (self.r, self.g, self.b)), ann


def gaussian_kernel(sigma):
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


@dataclass(frozen=True)
class GaussianBlur:
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def tag(self):
        return f"blur{self.sigma:g}"

    def apply(self, img, ann):
        _check_dims(img, ann)
        k = gaussian_kernel(self.sigma)
        r = len(k) // 2
        x = img.pixels.astype(np.float64)
        for axis in (0, 1):
            pad = [(0, 0)] * 3
            pad[axis] = (r, r)
            xp = np.pad(x, pad, mode="edge")
            n = x.shape[axis]
            x = sum(w * np.take(xp, np.arange(i, i + n), axis=axis) for i, w in enumerate(k))
        return ImageBuffer(np.clip(np.rint(x), 0, 255).astype(np.uint8)), ann


OP_TYPES = {
    "rotate90acw": Rotate90ACW,
    "mirror_horizontal": MirrorHorizontal,
    "brightness": Brightness,
    "color_balance": ColorBalance,
    "gaussian_blur": GaussianBlur,
}

DEFAULT_OPS = (
    Rotate90ACW(1),
    Rotate90ACW(2),
    Rotate90ACW(3),
    MirrorHorizontal(),
    ColorBalance(),
    Brightness(0.9),
    Brightness(0.8),
    Brightness(0.6),
    GaussianBlur(1.0),
)


def op_from_dict(d):
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in OP_TYPES:
        raise ValueError(f"unknown augment op {kind!r}; expected one of {sorted(OP_TYPES)}")
    return OP_TYPES[kind](**d)


def op_to_dict(op):
    kind = next(k for k, v in OP_TYPES.items() if isinstance(op, v))
    return {"type": kind, **{f: getattr(op, f) for f in op.__dataclass_fields__}}


def apply_augment(img, ann, op):
    return op.apply(img, ann)


# ---------------------------------------------------------------------------
# manifests and expansion


@dataclass(frozen=True)
class ManifestItem:
    id: str
    image: str
    annotation: str
    split: str = None


def read_manifest(path):
    """``{id: {"image", "annotation", "split"?}}``; relative paths resolve against the manifest."""
    path = Path(path)
    raw = json.loads(path.read_text())
    if not isinstance(raw, dict):
        raise ValueError("manifest must be a JSON object keyed by item id")
    base = path.parent
    out = []
    for k in sorted(raw):
        e = raw[k]
        out.append(
            ManifestItem(str(k), str(base / e["image"]), str(base / e["annotation"]), e.get("split"))
        )
    return out


def write_manifest(items, path):
    data = {}
    for it in sorted(items, key=lambda i: i.id):
        e = {"image": it.image, "annotation": it.annotation}
        if it.split is not None:
            e["split"] = it.split
        data[it.id] = e
    Path(path).write_text(json.dumps(data, indent=1) + "\n")


@dataclass
class ExpandResult:
    items: list = field(default_factory=list)

    def __len__(self):
        return len(self.items)


def _variants(img, ann, ops):
    yield "", img, ann
    for op in ops:
        yield op.tag, *op.apply(img, ann)


def expand_dataset(items, ops=DEFAULT_OPS, out_dir=".", threads=1, manifest_name="manifest.json"):
    """Write each item plus one variant per op to ``out_dir``.

    Variant files are named ``<stem>__<tag>.ppm`` / ``.xml``; originals keep their
    stem. A JSON manifest in id order is written last.
    """
    ops = tuple(ops)
    tags = [op.tag for op in ops]
    if len(set(tags)) != len(tags):
        raise ValueError(f"augment ops must have distinct tags, got {tags}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def work(item):
        img, ann = read_ppm(item.image), read_voc(item.annotation)
        _check_dims(img, ann)
        out = []
        for tag, vimg, vann in _variants(img, ann, ops):
            stem = item.id + (f"__{tag}" if tag else "")
            vann = replace(vann, filename=stem + ".ppm")
            ip, ap = out_dir / (stem + ".ppm"), out_dir / (stem + ".xml")
            try:
                write_ppm(vimg, ip)
                written.append(str(ip))
                ap.write_bytes(write_voc_xml(vann))
                written.append(str(ap))
            except OSError as e:
                raise ExpandError(f"failed writing {stem}: {e}", written) from e
            out.append(ManifestItem(stem, ip.name, ap.name, item.split))
        return out

    items = sorted(items, key=lambda i: i.id)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            chunks = list(ex.map(work, items))
    else:
        chunks = [work(it) for it in items]
    result = ExpandResult([m for c in chunks for m in c])
    try:
        write_manifest(result.items, out_dir / manifest_name)
    except OSError as e:
        raise ExpandError(f"failed writing manifest: {e}", written) from e
    return result


def annotations_to_gts(annotations, class_names):
    """``{image_id: [GroundTruth]}``.

    ``annotations`` is either a mapping from image id or a list, in which case
    the filename stem is the id. Unknown class names raise.
    """
    from fgdet.boxes import BoundingBox
    from fgdet.metrics import GroundTruth

    index = {n: i for i, n in enumerate(class_names)}
    if not isinstance(annotations, dict):
        annotations = {os.path.splitext(a.filename)[0]: a for a in annotations}
    out = {}
    for key, ann in annotations.items():
        items = []
        for o in ann.objects:
            if o.name not in index:
                raise DataConsistencyError(f"class {o.name!r} in {ann.filename} is not in the class list")
            items.append(GroundTruth(BoundingBox.from_corners(*o.corners), index[o.name]))
        out[key] = items
    return out
