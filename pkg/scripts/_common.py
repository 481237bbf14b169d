"""Shared helpers for the experiment scripts."""
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from mvagg.cli import main  # noqa: E402
from mvagg.config import ExperimentConfig, apply_overrides  # noqa: E402
from mvagg.simulator import write_dataset  # noqa: E402

# a few-minute configuration for trying the scripts out
QUICK = [
    "scene.rows=24", "scene.cols=36", "scene.cell_size=0.2", "scene.ped_min=3", "scene.ped_max=5",
    "scene.n_train=40", "scene.n_test=10", "scene.image_h=48", "scene.image_w=80",
    "model.C=8", "model.K=4", "epochs=6",
]


def prepare(out: Path, quick: bool, extra=()):
    """Write the base config and simulate its dataset (once) under ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    cfg = apply_overrides(ExperimentConfig(), (QUICK if quick else []) + list(extra))
    cfg_path = out / "base.json"
    cfg_path.write_text(cfg.dumps())
    data = out / "data"
    if not (data / "config.json").is_file():
        write_dataset(cfg.scene, None, data)
    return cfg_path, data


def run(*argv):
    code = main([str(a) for a in argv])
    if code:
        raise SystemExit(f"mvagg {argv[0]} failed with exit code {code}")


def report(path: Path) -> dict:
    return json.loads(Path(path).read_text())
