"""Camera-split generalisation: train on cameras 0,1 and their grid half, test on the rest.

    python3 scripts/split_experiment.py --out runs/split [--seeds 0 1 2] [--epochs 20] [--quick]
"""
import argparse
from pathlib import Path

import numpy as np

from _common import prepare, report, run


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/split")
    p.add_argument("--split", default="0,1")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int)
    p.add_argument("--quick", action="store_true")
    args = p.parse_args()
    out = Path(args.out)
    cfg, data = prepare(out, args.quick, [f"epochs={args.epochs}"] if args.epochs else [])
    rows = {}
    for gates in ("both", "none"):
        for seed in args.seeds:
            run_dir = out / f"{gates}_seed{seed}"
            run("split-eval", "--config", cfg, "--split", args.split, "--data", data, "--out", run_dir,
                "--set", f"model.gates={gates}", "--set", f"seed={seed}")
            rows[gates, seed] = (report(run_dir / "report_train_half.json")["moda"], report(run_dir / "report_test_half.json")["moda"])
    print("| model | train-half MODA | test-half MODA |\n|---|---|---|")
    for gates, label in (("both", "HAM"), ("none", "no attention")):
        a = np.mean([rows[gates, s][0] for s in args.seeds])
        b = np.mean([rows[gates, s][1] for s in args.seeds])
        print(f"| {label} | {100 * a:.1f} | {100 * b:.1f} |")


if __name__ == "__main__":
    main()
