"""Print head shapes and parameter totals for both network presets."""

import argparse

from fgdet import network


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--classes", type=int, default=4)
    ap.add_argument("--input-size", type=int, default=416)
    args = ap.parse_args()
    for name, build in sorted(network.BUILDERS.items()):
        spec = build(args.classes, args.input_size)
        rep = network.infer_shapes(spec)
        heads = ", ".join("x".join(map(str, rep.shapes[o])) for o in spec.outputs)
        print(f"{name:<9} heads {heads}  params {rep.total_params:,}")


if __name__ == "__main__":
    main()
