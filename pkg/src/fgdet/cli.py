"""Command-line entry point: ``fgdet <command> [options]``.

Exit codes: 0 success, 2 usage or input error, 3 data-consistency error,
4 internal check failure.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from fgdet import dataio, metrics, network, postprocess
from fgdet.boxes import LOSSES, BoundingBox
from fgdet.config import Config, load_config
from fgdet.errors import DataConsistencyError, FgdetError
from fgdet.gradcheck import run_gradcheck

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 2, 3, 4


class UsageError(FgdetError):
    pass


def _threads(value):
    if value == "auto":
        return os.cpu_count() or 1
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'auto', got {value!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("threads must be >= 1")
    return n


def _corners(value):
    try:
        vals = [float(v) for v in value.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x1,y1,x2,y2, got {value!r}") from None
    if len(vals) != 4:
        raise argparse.ArgumentTypeError(f"expected 4 comma-separated numbers, got {len(vals)}")
    return vals


def _global_flags(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=d, help="YAML config file")
    p.add_argument("--seed", type=int, default=d if suppress else 0, help="random seed (default 0)")
    p.add_argument("--threads", type=_threads, default=d if suppress else 1, help="N or 'auto'")
    p.add_argument("--format", choices=("json", "text"), default=d if suppress else "text")


def build_parser():
    parser = argparse.ArgumentParser(prog="fgdet", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def cmd(name, help):
        p = sub.add_parser(name, help=help, description=help)
        _global_flags(p, suppress=True)
        return p

    p = cmd("summary", "per-node output shapes and parameter counts")
    p.add_argument("--classes", type=int, help="number of classes")
    p.add_argument("--input-size", type=int, help="square input size, a multiple of 32")
    p.add_argument("--width-mult", type=float)
    p.add_argument("--preset", choices=sorted(network.BUILDERS))

    p = cmd("eval", "evaluate detections against VOC ground truth")
    p.add_argument("--gt", required=True, help="directory of VOC XML files or a JSON manifest")
    p.add_argument("--dets", required=True, help="detections file (text lines or JSON)")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--range", action="store_true", help="also report AP50:95, AP50, AP75")
    p.add_argument("--sizes", action="store_true", help="also report AP for small/medium/large")
    p.add_argument("--class-names", help="comma-separated names; class id i is the i-th name")
    p.add_argument("--curves", metavar="CSV", help="write PR-curve points here")
    p.add_argument("--out", help="write the report here instead of stdout")

    p = cmd("loss", "box regression loss between two corner boxes")
    p.add_argument("--pred", type=_corners, required=True, metavar="x1,y1,x2,y2")
    p.add_argument("--gt", type=_corners, required=True, metavar="x1,y1,x2,y2")
    p.add_argument("--kind", choices=sorted(LOSSES), default="ciou")

    p = cmd("nms", "confidence filtering then per-class NMS of a detections file")
    p.add_argument("--in", dest="inp", required=True, metavar="FILE")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--conf", type=float, default=0.3)
    p.add_argument("--out")

    p = cmd("gradcheck", "finite-difference check of analytic gradients")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--tol", type=float, default=1e-4)

    p = cmd("augment", "expand a dataset with the augmentation ops")
    p.add_argument("--in", dest="inp", required=True, metavar="MANIFEST")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--ops-config", metavar="PATH", help="YAML config whose augment.ops replace the defaults")

    p = cmd("init-weights", "write a weight file for the configured network")
    p.add_argument("--out", required=True)
    p.add_argument("--zero", action="store_true", help="all-zero weights instead of seeded random ones")

    p = cmd("decode", "run the network on a PPM image and write detections")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True, metavar="FILE.ppm")
    p.add_argument("--conf", type=float)
    p.add_argument("--iou", type=float)
    p.add_argument("--out")
    return parser


def _config(args, required=False):
    if args.config:
        return load_config(args.config)
    if required:
        raise UsageError(f"{args.command} needs --config")
    return Config()


def _emit(args, text, path=None):
    if path:
        Path(path).write_text(text if text.endswith("\n") else text + "\n")
    else:
        print(text)


def cmd_summary(args):
    cfg = _config(args)
    if args.classes is None and not (cfg.classes or cfg.network):
        raise UsageError("summary needs --classes (or a --config)")
    if args.preset:
        cfg.network = {**cfg.network, "preset": args.preset}
    spec = cfg.build_spec(args.classes, args.input_size, args.width_mult)
    rep = network.infer_shapes(spec)
    heads = [(o, rep.shapes[o]) for o in spec.outputs]
    if args.format == "json":
        out = {
            "input_shape": list(spec.input_shape),
            "nodes": [
                {"id": n.id, "layer": n.layer.kind, "shape": list(rep.shapes[n.id]), "params": rep.params[n.id]}
                for n in spec.nodes
            ],
            "heads": [{"id": o, "grid": s[0], "depth": s[2]} for o, s in heads],
            "total_params": rep.total_params,
        }
        _emit(args, json.dumps(out, indent=1))
    else:
        lines = [rep.to_text(spec), ""]
        lines += [f"head {o}: {s[0]}x{s[1]} grid, depth {s[2]}" for o, s in heads]
        _emit(args, "\n".join(lines))
    return EXIT_OK


def _load_gt(path):
    """``{image_id: Annotation}`` from a VOC directory or a JSON manifest."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.xml"))
        return {f.stem: dataio.read_voc(f) for f in files}
    if path.is_file():
        return {it.id: dataio.read_voc(it.annotation) for it in dataio.read_manifest(path)}
    raise UsageError(f"ground truth not found: {path}")


def cmd_eval(args):
    cfg = _config(args)
    anns = _load_gt(args.gt)
    if args.class_names:
        names = args.class_names.split(",")
    elif cfg.classes:
        names = cfg.classes
    else:
        names = sorted({o.name for a in anns.values() for o in a.objects})
    gts = dataio.annotations_to_gts(anns, names)
    dets = postprocess.read_detections(args.dets)
    mcfg = metrics.MatchConfig(args.iou)
    report = metrics.evaluate(dets, gts, names, mcfg, args.range, args.sizes, args.threads)
    _emit(args, report.to_json() if args.format == "json" else report.to_text(), args.out)
    if args.curves:
        Path(args.curves).write_text(report.curves_csv())
    return EXIT_OK


def cmd_loss(args):
    pred = BoundingBox.from_corners(*args.pred)
    gt = BoundingBox.from_corners(*args.gt)
    value = LOSSES[args.kind](pred, gt)
    if args.format == "json":
        _emit(args, json.dumps({"kind": args.kind, "loss": value}))
    else:
        _emit(args, f"{value:.6f}")
    return EXIT_OK


def _write_dets(args, dets, path):
    if args.format == "json":
        _emit(args, postprocess.to_json(dets), path)
    else:
        text = "\n".join(postprocess.format_line(d) for d in dets)
        if path:
            Path(path).write_text(text + "\n" if text else "")
        elif text:
            print(text)


def _check_unit(name, v, lo_open=False):
    if v is not None and not ((0 < v if lo_open else 0 <= v) and v <= 1):
        raise UsageError(f"--{name} must lie in {'(0' if lo_open else '[0'}, 1], got {v}")


def cmd_nms(args):
    _check_unit("iou", args.iou, lo_open=True)
    _check_unit("conf", args.conf)
    dets = postprocess.read_detections(args.inp)
    kept = postprocess.nms(postprocess.filter_confidence(dets, args.conf), args.iou)
    _write_dets(args, kept, args.out)
    return EXIT_OK


def cmd_gradcheck(args):
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    report = run_gradcheck(args.samples, args.seed, args.tol)
    _emit(args, json.dumps(report.to_dict(), indent=1) if args.format == "json" else report.to_text())
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_augment(args):
    if args.ops_config:
        ops = load_config(args.ops_config).ops
    else:
        ops = _config(args).ops
    items = dataio.read_manifest(args.inp)
    res = dataio.expand_dataset(items, ops, args.out, threads=args.threads)
    if args.format == "json":
        _emit(args, json.dumps({"inputs": len(items), "outputs": len(res), "manifest": str(Path(args.out) / "manifest.json")}))
    else:
        _emit(args, f"{len(items)} items -> {len(res)} outputs in {args.out}")
    return EXIT_OK


def cmd_init_weights(args):
    spec = _config(args, required=True).build_spec()
    store = network.init_weights(spec, seed=args.seed, zero=args.zero)
    network.serialize_weights(store, args.out)
    _emit(args, f"wrote {len(store)} nodes to {args.out}")
    return EXIT_OK


def cmd_decode(args):
    cfg = _config(args, required=True)
    conf = cfg.conf if args.conf is None else args.conf
    iou = cfg.iou if args.iou is None else args.iou
    _check_unit("conf", conf)
    _check_unit("iou", iou, lo_open=True)
    spec = cfg.build_spec()
    weights = network.deserialize_weights(args.weights, spec)
    img = dataio.read_ppm(args.image)
    h, w, _ = spec.input_shape
    if (img.height, img.width) != (h, w):
        raise UsageError(f"image is {img.width}x{img.height}; the network expects {w}x{h}")
    x = img.pixels.astype(np.float32) / 255.0
    heads = network.forward(spec, weights, x)
    image_id = Path(args.image).stem
    cands = postprocess.decode_heads(heads, cfg.anchor_set(h), h, image_id)
    kept = postprocess.nms(postprocess.filter_confidence(cands, conf), iou)
    _write_dets(args, kept, args.out)
    return EXIT_OK


COMMANDS = {
    "summary": cmd_summary,
    "eval": cmd_eval,
    "loss": cmd_loss,
    "nms": cmd_nms,
    "gradcheck": cmd_gradcheck,
    "augment": cmd_augment,
    "init-weights": cmd_init_weights,
    "decode": cmd_decode,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except DataConsistencyError as exc:
        print(f"fgdet {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FgdetError, ValueError, KeyError, OSError, yaml.YAMLError, json.JSONDecodeError) as exc:
        print(f"fgdet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
