"""HAM vs no-attention baseline on the synthetic dataset, several seeds.

    python3 scripts/directional.py --out runs/directional [--seeds 0 1 2] [--quick]
"""
import argparse
from pathlib import Path

import numpy as np

from _common import prepare, report, run


def parse():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/directional")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--quick", action="store_true", help="tiny scene, few epochs")
    return p.parse_args()


def main():
    args = parse()
    out = Path(args.out)
    cfg, data = prepare(out, args.quick)
    moda = {}
    for gates in ("both", "none"):
        for seed in args.seeds:
            run_dir = out / f"{gates}_seed{seed}"
            run("train", "--config", cfg, "--data", data, "--out", run_dir, "--set", f"model.gates={gates}", "--set", f"seed={seed}")
            moda[gates, seed] = report(run_dir / "report.json")["moda"]
    print("| seed | HAM | no attention |\n|---|---|---|")
    for seed in args.seeds:
        print(f"| {seed} | {100 * moda['both', seed]:.1f} | {100 * moda['none', seed]:.1f} |")
    ham = np.mean([moda["both", s] for s in args.seeds])
    base = np.mean([moda["none", s] for s in args.seeds])
    print(f"| mean | {100 * ham:.1f} | {100 * base:.1f} |")


if __name__ == "__main__":
    main()
