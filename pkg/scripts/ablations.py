"""Run the standard ablation sweeps (#homographies, top-K, gates, plane spacing, per-view loss).

    python3 scripts/ablations.py --out runs/ablations [--axes gates topk] [--quick]
"""
import argparse
from pathlib import Path

from _common import prepare, run

AXES = ("homographies", "topk", "gates", "dz", "perview_loss")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/ablations")
    p.add_argument("--axes", nargs="+", choices=AXES, default=list(AXES))
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--quick", action="store_true")
    args = p.parse_args()
    out = Path(args.out)
    cfg, data = prepare(out, args.quick)
    for axis in args.axes:
        extra = []
        if args.quick and axis == "topk":
            extra = ["--values", "1,2,4,8"]
        run("ablate", "--config", cfg, "--axis", axis, "--data", data, "--out", out / axis, "--jobs", args.jobs, *extra)


if __name__ == "__main__":
    main()
