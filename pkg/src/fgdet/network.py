"""Declarative detection network graphs.

A :class:`NetworkSpec` is an ordered list of nodes, each holding a layer
description and the ids of its inputs. Inputs must refer to earlier nodes (or
the implicit ``"input"`` node), so the node order is a topological order and the
graph is acyclic by construction.

Two builders are provided: :func:`build_improved_yolov4` (dense backbone stages,
CSP1 blocks, CSP2 neck, hard-swish) and :func:`build_original_yolov4`, a
reference CSPDarknet53 + SPP + PANet graph produced by the same machinery so the
two can be compared on shapes and parameter counts.
"""

import struct
from dataclasses import dataclass, field, fields

import numpy as np

from fgdet import tensor as T
from fgdet.activations import ActivationKind, activate
from fgdet.errors import FgdetError, ShapeError

INPUT = "input"
BN_EPS = 1e-5


class SpecError(FgdetError, ValueError):
    """The graph itself is malformed (unknown ids, cycles, wrong outputs...)."""


class WeightError(FgdetError, ValueError):
    """Weights are missing or do not fit the graph."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


# ---------------------------------------------------------------------------
# layer descriptions


@dataclass(frozen=True)
class ConvDesc:
    """One convolution inside a layer: conv -> batch norm -> activation.

    ``head=True`` means a plain 1x1 conv with bias and no norm or activation.
    """

    kernel: int
    stride: int
    cin: int
    cout: int
    activation: ActivationKind
    head: bool = False

    @property
    def tensor_shapes(self):
        k = (self.kernel, self.kernel, self.cin, self.cout)
        if self.head:
            return [k, (self.cout,)]
        return [k] + [(self.cout,)] * 4

    @property
    def params(self):
        # running mean/var are buffers, not trainable
        return self.kernel * self.kernel * self.cin * self.cout + (
            self.cout if self.head else 2 * self.cout
        )


def _act(value):
    return ActivationKind.parse(value)


def _single(in_shapes, layer):
    if len(in_shapes) != 1:
        raise ShapeError(f"{layer} takes exactly one input, got {len(in_shapes)}", ("inputs",))
    return in_shapes[0]


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    kernel: int = 1
    stride: int = 1
    activation: ActivationKind = field(default_factory=lambda: ActivationKind("leaky_relu"))

    kind = "conv"

    def __post_init__(self):
        object.__setattr__(self, "activation", _act(self.activation))
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise SpecError(f"conv kernel must be odd, got {self.kernel}")
        if self.out_channels < 1 or self.stride < 1:
            raise SpecError("conv needs out_channels >= 1 and stride >= 1")

    def convs(self, in_shapes):
        h, w, c = _single(in_shapes, "conv")
        return [ConvDesc(self.kernel, self.stride, c, self.out_channels, self.activation)]

    def out_shape(self, in_shapes):
        h, w, c = _single(in_shapes, "conv")
        p = self.kernel // 2
        if h + 2 * p < self.kernel or w + 2 * p < self.kernel:
            raise ShapeError(f"input {h}x{w} too small for kernel {self.kernel}", ("H", "W"))
        return ((h + 2 * p - self.kernel) // self.stride + 1,
                (w + 2 * p - self.kernel) // self.stride + 1,
                self.out_channels)

    def forward(self, inputs, run):
        return run(inputs[0])


def downsample(out_channels, activation="leaky_relu"):
    """3x3 stride-2 conv block halving the spatial size."""
    return ConvBlock(out_channels, 3, 2, activation)


CSP_VARIANTS = ("csp", "csp1", "csp2")


@dataclass(frozen=True)
class CSPBlock:
    """Cross-stage-partial block.

    The input feeds a trunk (1x1 conv, ``n`` units of 1x1 + 3x3 convs, closing
    conv) and a 1x1 shortcut conv, each with half the output channels. Both
    halves are concatenated and fused by a 1x1 conv. ``csp`` closes the trunk
    with a 1x1 conv and adds an identity around each unit; ``csp1`` closes with
    a 3x3 conv, keeping the identity; ``csp2`` closes with a 3x3 conv and has no
    identity inside the units.
    """

    variant: str
    n: int
    out_channels: int
    activation: ActivationKind = field(default_factory=lambda: ActivationKind("leaky_relu"))

    kind = "csp"

    def __post_init__(self):
        object.__setattr__(self, "activation", _act(self.activation))
        if self.variant not in CSP_VARIANTS:
            raise SpecError(f"CSP variant must be one of {CSP_VARIANTS}, got {self.variant!r}")
        if self.n < 1 or self.out_channels < 1:
            raise SpecError("CSP block needs n >= 1 and out_channels >= 1")

    @property
    def hidden(self):
        return max(1, self.out_channels // 2)

    @property
    def residual(self):
        return self.variant != "csp2"

    def convs(self, in_shapes):
        _, _, c = _single(in_shapes, "csp")
        h, a = self.hidden, self.activation
        out = [ConvDesc(1, 1, c, h, a)]
        for _ in range(self.n):
            out += [ConvDesc(1, 1, h, h, a), ConvDesc(3, 1, h, h, a)]
        out.append(ConvDesc(1 if self.variant == "csp" else 3, 1, h, h, a))
        out.append(ConvDesc(1, 1, c, h, a))
        out.append(ConvDesc(1, 1, 2 * h, self.out_channels, a))
        return out

    def out_shape(self, in_shapes):
        h, w, _ = _single(in_shapes, "csp")
        return (h, w, self.out_channels)

    def forward(self, inputs, run):
        x = inputs[0]
        y = run(x)
        for _ in range(self.n):
            z = run(run(y))
            y = T._freeze(y + z) if self.residual else z
        y = run(y)
        s = run(x)
        return run(T.concat_channels([y, s]))


@dataclass(frozen=True)
class DenseBlock:
    """Dense stage: layer ``i`` sees the concatenation of the input and all earlier
    layer outputs and adds ``growth`` channels (1x1 bottleneck to ``2*growth``, then
    3x3 to ``growth``). Output has ``C + num_layers * growth`` channels."""

    num_layers: int
    growth: int
    activation: ActivationKind = field(default_factory=lambda: ActivationKind("leaky_relu"))

    kind = "dense"

    def __post_init__(self):
        object.__setattr__(self, "activation", _act(self.activation))
        if self.num_layers < 1 or self.growth < 1:
            raise SpecError("dense block needs num_layers >= 1 and growth >= 1")

    def convs(self, in_shapes):
        _, _, c = _single(in_shapes, "dense")
        g, a = self.growth, self.activation
        out = []
        for i in range(self.num_layers):
            out += [ConvDesc(1, 1, c + i * g, 2 * g, a), ConvDesc(3, 1, 2 * g, g, a)]
        return out

    def out_shape(self, in_shapes):
        h, w, c = _single(in_shapes, "dense")
        return (h, w, c + self.num_layers * self.growth)

    def forward(self, inputs, run):
        feats = [inputs[0]]
        for _ in range(self.num_layers):
            x = T.concat_channels(feats) if len(feats) > 1 else feats[0]
            feats.append(run(run(x)))
        return T.concat_channels(feats)


@dataclass(frozen=True)
class SPP:
    """Spatial pyramid pooling: input concatenated with stride-1 same-size max pools."""

    kernels: tuple = (5, 9, 13)

    kind = "spp"

    def __post_init__(self):
        k = tuple(int(v) for v in self.kernels)
        object.__setattr__(self, "kernels", k)
        if not k or any(v % 2 == 0 or v < 1 for v in k) or len(set(k)) != len(k):
            raise SpecError(f"SPP kernels must be odd and distinct, got {k}")

    def convs(self, in_shapes):
        return []

    def out_shape(self, in_shapes):
        h, w, c = _single(in_shapes, "spp")
        return (h, w, c * (len(self.kernels) + 1))

    def forward(self, inputs, run):
        x = inputs[0]
        pools = [T.maxpool2d(x, k, 1, k // 2) for k in self.kernels]
        return T.concat_channels([x] + pools)


@dataclass(frozen=True)
class Upsample2x:
    kind = "upsample"

    def convs(self, in_shapes):
        return []

    def out_shape(self, in_shapes):
        h, w, c = _single(in_shapes, "upsample")
        return (2 * h, 2 * w, c)

    def forward(self, inputs, run):
        return T.upsample2x(inputs[0])


@dataclass(frozen=True)
class Concat:
    kind = "concat"

    def convs(self, in_shapes):
        return []

    def out_shape(self, in_shapes):
        if not in_shapes:
            raise ShapeError("concat needs at least one input", ("inputs",))
        if len({s[:2] for s in in_shapes}) != 1:
            raise ShapeError(f"concat spatial mismatch {in_shapes}", ("H", "W"))
        h, w = in_shapes[0][:2]
        return (h, w, sum(s[2] for s in in_shapes))

    def forward(self, inputs, run):
        return T.concat_channels(inputs)


@dataclass(frozen=True)
class Head:
    """1x1 conv with bias to ``num_anchors * (5 + num_classes)`` channels."""

    num_anchors: int
    num_classes: int

    kind = "head"

    def __post_init__(self):
        if self.num_anchors < 1 or self.num_classes < 1:
            raise SpecError("head needs num_anchors >= 1 and num_classes >= 1")

    @property
    def depth(self):
        return self.num_anchors * (5 + self.num_classes)

    def convs(self, in_shapes):
        _, _, c = _single(in_shapes, "head")
        return [ConvDesc(1, 1, c, self.depth, ActivationKind("linear"), head=True)]

    def out_shape(self, in_shapes):
        h, w, _ = _single(in_shapes, "head")
        return (h, w, self.depth)

    def forward(self, inputs, run):
        return run(inputs[0])


LAYER_TYPES = {cls.kind: cls for cls in (ConvBlock, CSPBlock, DenseBlock, SPP, Upsample2x, Concat, Head)}


def layer_to_dict(layer):
    out = {"layer": layer.kind}
    for f in fields(layer):
        v = getattr(layer, f.name)
        if isinstance(v, ActivationKind):
            v = v.name if v.name != "leaky_relu" else {"name": v.name, "slope": v.slope}
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def layer_from_dict(d):
    d = dict(d)
    kind = d.pop("layer")
    if kind not in LAYER_TYPES:
        raise SpecError(f"unknown layer type {kind!r}")
    cls = LAYER_TYPES[kind]
    if "kernels" in d:
        d["kernels"] = tuple(d["kernels"])
    try:
        return cls(**d)
    except TypeError as exc:
        raise SpecError(f"bad fields for {kind}: {exc}") from None


# ---------------------------------------------------------------------------
# graph


@dataclass(frozen=True)
class Node:
    id: str
    layer: object
    inputs: tuple


@dataclass(frozen=True)
class NetworkSpec:
    nodes: tuple
    outputs: tuple
    input_shape: tuple

    def __post_init__(self):
        nodes = tuple(n if isinstance(n, Node) else Node(n[0], n[1], tuple(n[2])) for n in self.nodes)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        seen = {INPUT}
        for n in nodes:
            if n.id in seen:
                raise SpecError(f"duplicate node id {n.id!r}")
            if not n.inputs:
                raise SpecError(f"node {n.id!r} has no inputs")
            for src in n.inputs:
                if src not in seen:
                    raise SpecError(
                        f"node {n.id!r} reads {src!r}, which is not an earlier node (cycle or unknown id)"
                    )
            seen.add(n.id)
        if len(self.outputs) != 3:
            raise SpecError(f"exactly three output heads are required, got {len(self.outputs)}")
        by_id = self.by_id
        for o in self.outputs:
            if o not in by_id or not isinstance(by_id[o].layer, Head):
                raise SpecError(f"output {o!r} is not a head node")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input_shape must be H x W x C, got {self.input_shape}")

    @property
    def by_id(self):
        return {n.id: n for n in self.nodes}

    @property
    def heads(self):
        by_id = self.by_id
        return [by_id[o].layer for o in self.outputs]

    def to_config(self):
        return {
            "input_shape": list(self.input_shape),
            "outputs": list(self.outputs),
            "nodes": [
                {"id": n.id, "inputs": list(n.inputs), **layer_to_dict(n.layer)} for n in self.nodes
            ],
        }

    @classmethod
    def from_config(cls, cfg):
        try:
            nodes = []
            for entry in cfg["nodes"]:
                entry = dict(entry)
                nid, inputs = entry.pop("id"), entry.pop("inputs")
                nodes.append(Node(str(nid), layer_from_dict(entry), tuple(inputs)))
            return cls(tuple(nodes), tuple(cfg["outputs"]), tuple(cfg["input_shape"]))
        except KeyError as exc:
            raise SpecError(f"network config is missing key {exc}") from None


@dataclass(frozen=True)
class ShapeReport:
    shapes: dict
    params: dict

    @property
    def total_params(self):
        return sum(self.params.values())

    def to_text(self, spec):
        lines = [f"{'node':<14} {'layer':<9} {'output':>16} {'params':>12}"]
        for n in spec.nodes:
            s = "x".join(str(v) for v in self.shapes[n.id])
            lines.append(f"{n.id:<14} {n.layer.kind:<9} {s:>16} {self.params[n.id]:>12,}")
        lines.append(f"{'total':<14} {'':<9} {'':>16} {self.total_params:>12,}")
        return "\n".join(lines)


def infer_shapes(spec):
    """Output shape and trainable parameter count of every node."""
    shapes = {INPUT: spec.input_shape}
    params = {}
    for n in spec.nodes:
        ins = [shapes[s] for s in n.inputs]
        try:
            shapes[n.id] = n.layer.out_shape(ins)
            params[n.id] = sum(c.params for c in n.layer.convs(ins))
        except ShapeError as exc:
            detail = ", ".join(f"{s}={shapes[s]}" for s in n.inputs)
            raise ShapeError(f"node {n.id!r} rejects inputs ({detail}): {exc}", exc.axes) from None
    del shapes[INPUT]
    return ShapeReport(shapes, params)


def count_params(spec):
    """``(per-node counts, total)``. Conv blocks count K*K*Cin*Cout + 2*Cout."""
    report = infer_shapes(spec)
    return dict(report.params), report.total_params


def conv_plan(spec):
    """Per-node list of :class:`ConvDesc`, in the order their weights are stored."""
    shapes = {INPUT: spec.input_shape}
    plan = {}
    for n in spec.nodes:
        ins = [shapes[s] for s in n.inputs]
        shapes[n.id] = n.layer.out_shape(ins)
        plan[n.id] = n.layer.convs(ins)
    return plan


# ---------------------------------------------------------------------------
# builders


DEFAULT_ANCHORS_416 = (
    ((10, 13), (16, 30), (33, 23)),
    ((30, 61), (62, 45), (59, 119)),
    ((116, 90), (156, 198), (373, 326)),
)

IMPROVED_DEFAULTS = {
    "backbone_activation": "hard_swish",
    "neck_activation": "hard_swish",
    # (layers, growth): 26x26 stage 256 + 4*64 = 512, 13x13 stage 512 + 4*128 = 1024
    "dense_stages": ((4, 64), (4, 128)),
    "csp1_repeats": (4, 2),
    "csp2_repeats": 1,
    "spp_kernels": (5, 9, 13),
}

ORIGINAL_DEFAULTS = {
    "backbone_activation": "mish",
    "neck_activation": "leaky_relu",
    "csp_repeats": (1, 2, 8, 8, 4),
    "spp_kernels": (5, 9, 13),
}


class _Graph:
    def __init__(self, width_mult):
        self.nodes = []
        self.width_mult = width_mult
        self._count = {}

    def ch(self, c):
        return max(1, int(round(c * self.width_mult)))

    def add(self, name, layer, *inputs):
        i = self._count.get(name, 0)
        self._count[name] = i + 1
        nid = name if i == 0 else f"{name}_{i}"
        self.nodes.append(Node(nid, layer, tuple(inputs)))
        return nid

    def conv(self, name, x, c, k, act, stride=1):
        return self.add(name, ConvBlock(self.ch(c), k, stride, act), x)

    def conv_stack(self, name, x, c, act):
        # 1x1 c, 3x3 2c, 1x1 c, 3x3 2c, 1x1 c
        for i, (mult, k) in enumerate(((1, 1), (2, 3), (1, 1), (2, 3), (1, 1))):
            x = self.conv(f"{name}_c{i}", x, c * mult, k, act)
        return x


def _check_size(input_size):
    if input_size % 32 != 0:
        raise SpecError(f"input size must be a multiple of 32, got {input_size}")
    if input_size < 64:
        raise SpecError(f"input size must be at least 64, got {input_size}")


def _darknet_stem(g, act, repeats):
    x = g.conv("stem", INPUT, 32, 3, act)
    outs = []
    for i, (c, n) in enumerate(zip((64, 128, 256), repeats)):
        x = g.conv(f"down{i + 1}", x, c, 3, act, stride=2)
        x = g.add(f"csp{i + 1}", CSPBlock("csp", n, g.ch(c), act), x)
        outs.append(x)
    return outs[-1]


def _neck(g, p3, p4, p5, num_classes, num_anchors, act, fuse):
    """SPP + PANet + heads. ``fuse(name, x, c)`` is the feature fusion block."""
    x = g.conv("spp_pre0", p5, 512, 1, act)
    x = g.conv("spp_pre1", x, 1024, 3, act)
    x = g.conv("spp_pre2", x, 512, 1, act)
    x = g.add("spp", SPP(IMPROVED_DEFAULTS["spp_kernels"]), x)
    x = g.conv("spp_post0", x, 512, 1, act)
    x = g.conv("spp_post1", x, 1024, 3, act)
    p5n = g.conv("spp_post2", x, 512, 1, act)

    # top-down
    u = g.add("up5", Upsample2x(), g.conv("lat5", p5n, 256, 1, act))
    x = g.add("cat4", Concat(), g.conv("lat4", p4, 256, 1, act), u)
    n4 = fuse("td4", x, 256)
    u = g.add("up4", Upsample2x(), g.conv("lat4b", n4, 128, 1, act))
    x = g.add("cat3", Concat(), g.conv("lat3", p3, 128, 1, act), u)
    n3 = fuse("td3", x, 128)

    # bottom-up + heads
    head = Head(num_anchors, num_classes)
    h3 = g.add("head52", head, g.conv("head52_conv", n3, 256, 3, act))
    x = g.add("cat4u", Concat(), g.conv("bu3", n3, 256, 3, act, stride=2), n4)
    m4 = fuse("bu4", x, 256)
    h4 = g.add("head26", head, g.conv("head26_conv", m4, 512, 3, act))
    x = g.add("cat5u", Concat(), g.conv("bu4d", m4, 512, 3, act, stride=2), p5n)
    m5 = fuse("bu5", x, 512)
    h5 = g.add("head13", head, g.conv("head13_conv", m5, 1024, 3, act))
    return h3, h4, h5


def build_improved_yolov4(num_classes, input_size=416, width_mult=1.0, num_anchors=3, **overrides):
    """Dense-CSPDarknet53 + SPP + CSP2 PANet with three heads at strides 8, 16, 32.

    ``overrides`` may replace any key of :data:`IMPROVED_DEFAULTS`.
    """
    _check_size(input_size)
    cfg = {**IMPROVED_DEFAULTS, **overrides}
    bact = ActivationKind.parse(cfg["backbone_activation"])
    nact = ActivationKind.parse(cfg["neck_activation"])
    g = _Graph(width_mult)
    p3 = _darknet_stem(g, bact, (1, 2, 8))

    (l1, g1), (l2, g2) = cfg["dense_stages"]
    r1, r2 = cfg["csp1_repeats"]
    x = g.conv("down4", p3, 256, 3, bact, stride=2)
    x = g.add("dense1", DenseBlock(l1, g.ch(g1), bact), x)
    p4 = g.add("csp1_4", CSPBlock("csp1", r1, g.ch(512), bact), x)
    x = g.conv("down5", p4, 512, 3, bact, stride=2)
    x = g.add("dense2", DenseBlock(l2, g.ch(g2), bact), x)
    p5 = g.add("csp1_5", CSPBlock("csp1", r2, g.ch(1024), bact), x)

    n = cfg["csp2_repeats"]

    def fuse(name, x, c):
        return g.add(name, CSPBlock("csp2", n, g.ch(c), nact), x)

    outs = _neck(g, p3, p4, p5, num_classes, num_anchors, nact, fuse)
    return NetworkSpec(tuple(g.nodes), outs, (input_size, input_size, 3))


def build_original_yolov4(num_classes, input_size=416, width_mult=1.0, num_anchors=3, **overrides):
    """Reference CSPDarknet53 + SPP + PANet (five-conv fusion stacks)."""
    _check_size(input_size)
    cfg = {**ORIGINAL_DEFAULTS, **overrides}
    bact = ActivationKind.parse(cfg["backbone_activation"])
    nact = ActivationKind.parse(cfg["neck_activation"])
    reps = cfg["csp_repeats"]
    g = _Graph(width_mult)
    p3 = _darknet_stem(g, bact, reps[:3])
    x = g.conv("down4", p3, 512, 3, bact, stride=2)
    p4 = g.add("csp4", CSPBlock("csp", reps[3], g.ch(512), bact), x)
    x = g.conv("down5", p4, 1024, 3, bact, stride=2)
    p5 = g.add("csp5", CSPBlock("csp", reps[4], g.ch(1024), bact), x)

    def fuse(name, x, c):
        return g.conv_stack(name, x, c, nact)

    outs = _neck(g, p3, p4, p5, num_classes, num_anchors, nact, fuse)
    return NetworkSpec(tuple(g.nodes), outs, (input_size, input_size, 3))


BUILDERS = {"improved": build_improved_yolov4, "original": build_original_yolov4}


# ---------------------------------------------------------------------------
# weights


class WeightStore:
    """Immutable mapping ``node id -> tuple of float32 arrays``."""

    def __init__(self, tensors):
        frozen = {}
        for nid, arrs in tensors.items():
            out = []
            for a in arrs:
                a = np.array(a, dtype=np.float32, copy=True)
                a.flags.writeable = False
                out.append(a)
            frozen[str(nid)] = tuple(out)
        self._tensors = frozen

    def __getitem__(self, nid):
        return self._tensors[nid]

    def __contains__(self, nid):
        return nid in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def __eq__(self, other):
        if not isinstance(other, WeightStore) or list(self) != list(other):
            return False
        return all(
            len(a) == len(b) and all(x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in zip(a, b))
            for a, b in zip(self._tensors.values(), other._tensors.values())
        )

    def validate(self, spec):
        plan = conv_plan(spec)
        for nid, convs in plan.items():
            expected = [s for c in convs for s in c.tensor_shapes]
            if not expected:
                continue
            if nid not in self._tensors:
                raise WeightError(f"no weights for node {nid!r}", nid)
            got = [a.shape for a in self._tensors[nid]]
            if got != [tuple(s) for s in expected]:
                raise WeightError(f"node {nid!r}: expected tensor shapes {expected}, got {got}", nid)


def init_weights(spec, seed=0, zero=False):
    """Weights for every conv in ``spec``; all zeros, or seeded random values."""
    rng = np.random.default_rng(seed)
    out = {}
    for nid, convs in conv_plan(spec).items():
        arrs = []
        for c in convs:
            for shape in c.tensor_shapes:
                if zero:
                    arrs.append(np.zeros(shape))
                elif len(shape) == 4:
                    fan_in = shape[0] * shape[1] * shape[2]
                    arrs.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape))
                else:
                    arrs.append(rng.normal(0.0, 0.1, shape))
            if not zero and not c.head:
                # gamma, beta, mean, var: keep gamma and var positive
                arrs[-4] = rng.uniform(0.5, 1.5, c.cout)
                arrs[-1] = rng.uniform(0.5, 1.5, c.cout)
        if arrs:
            out[nid] = arrs
    return WeightStore(out)


def _apply_conv(desc, tensors, x):
    k = tensors[0]
    y = T.conv2d(x, k, desc.stride, desc.kernel // 2)
    if desc.head:
        return T._freeze(y + tensors[1])
    bn = T.BatchNormParams(*tensors[1:5], eps=BN_EPS)
    y = T.batchnorm_apply(y, bn)
    if desc.activation.name == "linear":
        return y
    return T._freeze(activate(desc.activation, y))


def forward(spec, weights, x, return_all=False):
    """Evaluate the graph; returns the three head maps in output order.

    With ``return_all`` the dict of every node's output is returned as well.
    """
    x = np.asarray(x)
    if x.shape != spec.input_shape:
        raise ShapeError(f"input shape {x.shape} != network input {spec.input_shape}", ("input",))
    weights.validate(spec)
    plan = conv_plan(spec)
    values = {INPUT: T.as_tensor(x)}
    for n in spec.nodes:
        convs = plan[n.id]
        tensors = weights[n.id] if convs else ()
        per = [] if not convs else [len(c.tensor_shapes) for c in convs]
        state = {"i": 0, "t": 0}

        def run(inp, convs=convs, tensors=tensors, per=per, state=state):
            i = state["i"]
            desc = convs[i]
            chunk = tensors[state["t"] : state["t"] + per[i]]
            state["i"] += 1
            state["t"] += per[i]
            return _apply_conv(desc, chunk, inp)

        values[n.id] = n.layer.forward([values[s] for s in n.inputs], run)
        if state["i"] != len(convs):
            raise WeightError(f"node {n.id!r} used {state['i']} of {len(convs)} convs", n.id)
    heads = tuple(values[o] for o in spec.outputs)
    return (heads, values) if return_all else heads


# ---------------------------------------------------------------------------
# weight file: b"FGDW", u32 version, u32 node count, then per node a
# u32-length-prefixed utf-8 id, u8 tensor count, and per tensor u8 rank,
# rank x u32 dims, raw little-endian float32 data. All integers little-endian.

WEIGHT_MAGIC = b"FGDW"
WEIGHT_VERSION = 1


class WeightFormatError(WeightError):
    """Not a weight file (bad magic or trailing bytes)."""


class WeightVersionError(WeightError):
    pass


class WeightTruncatedError(WeightError):
    pass


def serialize_weights(store, path):
    buf = bytearray(WEIGHT_MAGIC)
    buf += struct.pack("<II", WEIGHT_VERSION, len(store))
    for nid, arrs in store.items():
        raw = nid.encode("utf-8")
        if len(arrs) > 255:
            raise WeightError(f"node {nid!r} has {len(arrs)} tensors; the format allows 255", nid)
        buf += struct.pack("<I", len(raw)) + raw + struct.pack("<B", len(arrs))
        for a in arrs:
            buf += struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
            buf += a.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def deserialize_weights(path, spec=None):
    """Read a weight file; with ``spec`` also check every node's tensor shapes.

    Nothing is returned unless the whole file parses.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise WeightTruncatedError(f"weight file truncated at byte {pos} (needed {n} more)")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4) != WEIGHT_MAGIC:
        raise WeightFormatError("not a weight file: bad magic bytes")
    version, count = struct.unpack("<II", take(8))
    if version != WEIGHT_VERSION:
        raise WeightVersionError(f"weight file version {version}, expected {WEIGHT_VERSION}")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        nid = take(n).decode("utf-8")
        (k,) = struct.unpack("<B", take(1))
        arrs = []
        for _ in range(k):
            (rank,) = struct.unpack("<B", take(1))
            dims = struct.unpack(f"<{rank}I", take(4 * rank))
            size = int(np.prod(dims, dtype=np.int64))
            arrs.append(np.frombuffer(take(4 * size), dtype="<f4").reshape(dims))
        tensors[nid] = arrs
    if pos != len(data):
        raise WeightFormatError(f"{len(data) - pos} trailing bytes after the last node")
    store = WeightStore(tensors)
    if spec is not None:
        store.validate(spec)
    return store
