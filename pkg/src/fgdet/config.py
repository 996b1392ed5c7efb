"""One YAML file drives network building, anchors, post-processing and augmentation.

Example::

    classes: [early_blight, late_blight, leaf_mold, septoria]
    network:
      preset: improved        # improved | original
      input_size: 416
      width_mult: 1.0
      overrides: {csp2_repeats: 1}
    anchors:                  # pixels at input_size, finest scale first
      - [[10, 13], [16, 30], [33, 23]]
      - [[30, 61], [62, 45], [59, 119]]
      - [[116, 90], [156, 198], [373, 326]]
    postprocess: {conf: 0.3, iou: 0.5}
    augment:
      ops:
        - {type: rotate90acw, k: 1}
        - {type: brightness, factor: 0.8}

``network`` may instead hold an explicit graph (``nodes``, ``outputs``,
``input_shape``) in the form produced by ``NetworkSpec.to_config``.
"""

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from fgdet import dataio, network
from fgdet.errors import FgdetError
from fgdet.postprocess import AnchorSet


class ConfigError(FgdetError, ValueError):
    pass


TOP_KEYS = {"classes", "network", "anchors", "postprocess", "augment"}
NETWORK_KEYS = {"preset", "num_classes", "input_size", "width_mult", "num_anchors", "overrides"}
GRAPH_KEYS = {"nodes", "outputs", "input_shape"}


@dataclass
class Config:
    classes: list = field(default_factory=list)
    network: dict = field(default_factory=dict)
    anchors: object = None
    conf: float = 0.3
    iou: float = 0.5
    ops: tuple = dataio.DEFAULT_OPS

    @property
    def input_size(self):
        if GRAPH_KEYS & set(self.network):
            return int(self.network["input_shape"][0])
        return int(self.network.get("input_size", 416))

    def build_spec(self, num_classes=None, input_size=None, width_mult=None):
        net = self.network
        if GRAPH_KEYS & set(net):
            return network.NetworkSpec.from_config(net)
        preset = net.get("preset", "improved")
        if preset not in network.BUILDERS:
            raise ConfigError(f"unknown network preset {preset!r}; expected one of {sorted(network.BUILDERS)}")
        n = num_classes if num_classes is not None else net.get("num_classes", len(self.classes) or None)
        if n is None:
            raise ConfigError("number of classes is unknown: set classes or network.num_classes")
        return network.BUILDERS[preset](
            int(n),
            int(input_size if input_size is not None else net.get("input_size", 416)),
            float(width_mult if width_mult is not None else net.get("width_mult", 1.0)),
            int(net.get("num_anchors", 3)),
            **dict(net.get("overrides") or {}),
        )

    def anchor_set(self, input_size=None):
        if self.anchors is None:
            return AnchorSet.default(input_size or self.input_size)
        return AnchorSet(self.anchors)


def _unknown(d, allowed, where):
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(extra))}")


def parse_config(data):
    """Build a :class:`Config` from a parsed YAML mapping."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    _unknown(data, TOP_KEYS, "config")
    net = dict(data.get("network") or {})
    if GRAPH_KEYS & set(net):
        _unknown(net, GRAPH_KEYS, "network")
    else:
        _unknown(net, NETWORK_KEYS, "network")
    post = dict(data.get("postprocess") or {})
    _unknown(post, {"conf", "iou"}, "postprocess")
    aug = dict(data.get("augment") or {})
    _unknown(aug, {"ops"}, "augment")
    try:
        ops = tuple(dataio.op_from_dict(o) for o in aug["ops"]) if "ops" in aug else dataio.DEFAULT_OPS
        anchors = data.get("anchors")
        if anchors is not None:
            AnchorSet(anchors)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return Config(
        classes=[str(c) for c in data.get("classes") or []],
        network=net,
        anchors=anchors,
        conf=float(post.get("conf", 0.3)),
        iou=float(post.get("iou", 0.5)),
        ops=ops,
    )


def load_config(path):
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return parse_config(data)


def dump_config(cfg):
    """YAML text that :func:`parse_config` reads back to an equivalent config."""
    data = {
        "classes": list(cfg.classes),
        "network": cfg.network,
        "postprocess": {"conf": cfg.conf, "iou": cfg.iou},
        "augment": {"ops": [dataio.op_to_dict(o) for o in cfg.ops]},
    }
    if cfg.anchors is not None:
        data["anchors"] = [[list(p) for p in s] for s in cfg.anchors]
    return yaml.safe_dump(data, sort_keys=False)
