"""Do spatial attention maps follow plane height?

Trains two models whose plane stacks share some heights (spacing 0.4 m with
4 planes, spacing 0.2 m with 7 planes), then correlates their per-camera
spatial attention maps. Pairs of planes at the same height should correlate
more than pairs at different heights. Reported, not asserted.

    python3 scripts/plane_heights.py --out runs/planes [--quick]
"""
import argparse
from itertools import product
from pathlib import Path

import numpy as np

from _common import prepare, run
from mvagg import checkpoint
from mvagg.analysis import collect
from mvagg.config import ExperimentConfig
from mvagg.pipeline.training import Rig
from mvagg.simulator import read_dataset

STACKS = {"coarse": (4, 0.4), "fine": (7, 0.2)}


def spatial_maps(run_dir: Path, ds, frames):
    cfg = ExperimentConfig.loads((run_dir / "config.json").read_text())
    rig = Rig.build(ds.calibrations, ds.config.grid, cfg.model.D, cfg.model.dz)
    st = collect(frames, checkpoint.load(run_dir / "last.bin"), rig, cfg.model)
    heights = [round(k * cfg.model.dz, 6) for k in range(cfg.model.D)]
    return heights, [[m / st.frames for m in cam] for cam in st.spatial_maps]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/planes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true")
    args = p.parse_args()
    out = Path(args.out)
    cfg, data = prepare(out, args.quick)
    ds = read_dataset(data)
    frames = [ds[k] for k in ds.test_indices()]
    maps = {}
    for name, (D, dz) in STACKS.items():
        run_dir = out / name
        run("train", "--config", cfg, "--data", data, "--out", run_dir,
            "--set", f"model.D={D}", "--set", f"model.dz={dz}", "--set", "model.K=null", "--set", f"seed={args.seed}")
        maps[name] = spatial_maps(run_dir, ds, frames)
    (ha, ma), (hb, mb) = maps["coarse"], maps["fine"]
    same, diff = [], []
    for (i, a), (j, b) in product(enumerate(ha), enumerate(hb)):
        if a == 0.0 or b == 0.0:
            continue  # the ground plane is shared by construction
        r = np.mean([np.corrcoef(ma[c][i].ravel(), mb[c][j].ravel())[0, 1] for c in range(len(ma))])
        (same if a == b else diff).append(r)
        print(f"coarse {a:.1f} m vs fine {b:.1f} m: mean correlation {r:+.3f}")
    print(f"same height {np.nanmean(same):+.3f} over {len(same)} pairs; different heights {np.nanmean(diff):+.3f} over {len(diff)} pairs")


if __name__ == "__main__":
    main()
