"""``mvagg`` command line: simulate | train | eval | ablate | analyze | split-eval.

Every command takes ``--config FILE`` and repeatable ``--set key=value``
overrides (dotted keys, JSON values). ``MVAGG_SEED`` overrides the seed.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import checkpoint
from .analysis import AnalysisError, collect, write_analysis
from .attention import HamConfigError
from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, apply_overrides, load_config
from .geometry import GeometryError
from .metrics import Evaluator, decode, write_report
from .pipeline.losses import gaussian_targets
from .pipeline.model import PipelineConfigError, forward
from .pipeline.training import Rig, TrainingError, evaluate, fit, new_params, prepare, total_loss
from .simulator import DatasetError, SimulationError, camera_split, read_dataset, write_dataset
from .tensor import no_recording

log = logging.getLogger("mvagg")

USAGE, RUNTIME = 1, 2
USAGE_ERRORS = (ConfigError, PipelineConfigError, HamConfigError)
RUNTIME_ERRORS = (TrainingError, DatasetError, SimulationError, CheckpointError, AnalysisError, GeometryError, OSError)

AXES = ("homographies", "topk", "gates", "dz", "perview_loss")
DEFAULT_VALUES = {
    "homographies": ["2", "4", "6", "8"],
    "topk": ["1", "2", "4", "8", "16", "32"],
    "gates": ["none", "channel", "spatial", "both"],
    "dz": ["0.1", "0.2", "0.4", "0.6"],
    "perview_loss": ["none", "foot", "head+foot"],
}
TABLE_FIELDS = ("moda", "modp", "precision", "recall", "tp", "fp", "fn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --------------------------------------------------------------------------
# shared helpers


def _frames(ds, indices) -> list:
    return [ds[k] for k in indices]


def _scene_from_dataset(cfg: ExperimentConfig, ds) -> ExperimentConfig:
    return replace(cfg, scene=ds.config)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def _mean_loss(frames, params, rig: Rig, model) -> float:
    vals = []
    with no_recording():
        for s in frames:
            inp = prepare(s, rig, model)
            out = forward(inp.images, inp.h_feat, rig.grid, params, model)
            vals.append(float(total_loss(out, inp, model).data))
    return float(np.mean(vals)) if vals else float("nan")


def run_training(cfg: ExperimentConfig, train_frames, test_frames, rig: Rig, out_dir: Path) -> dict:
    """Train, keep best/last checkpoints and a JSON-lines log; returns the final test report."""
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "config.json", cfg.to_json())
    model = cfg.model
    params = new_params(model, rig.n_views, cfg.seed)
    init_rep = evaluate(test_frames, params, rig, model, cfg.metric)
    records = [{
        "epoch": 0,
        "train_loss": _mean_loss(train_frames, params, rig, model),
        "moda": init_rep.moda, "modp": init_rep.modp,
        "precision": init_rep.precision, "recall": init_rep.recall,
    }]
    best = {"moda": init_rep.moda, "epoch": 0}
    checkpoint.save(out_dir / "checkpoint.bin", params)

    def on_epoch(epoch, rec, p):
        records.append(rec)
        if rec["moda"] > best["moda"] or math.isnan(best["moda"]):
            best.update(moda=rec["moda"], epoch=epoch)
            checkpoint.save(out_dir / "checkpoint.bin", p)

    try:
        params, _ = fit(train_frames, test_frames, rig, model, cfg.train, cfg.metric, params=params, on_epoch=on_epoch)
    finally:
        with open(out_dir / "log.jsonl", "w") as fh:
            for r in records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    checkpoint.save(out_dir / "last.bin", params)
    final = evaluate(test_frames, params, rig, model, cfg.metric)
    write_report(out_dir / "report.json", final)
    _write_json(out_dir / "best.json", best)
    return {"report": final, "best": best, "history": records}


def _load_run(ckpt_path: Path, config_path: Optional[str], overrides):
    cfg_file = Path(config_path) if config_path else ckpt_path.parent / "config.json"
    if not cfg_file.is_file():
        raise ConfigError(f"no config beside checkpoint: {cfg_file}")
    cfg = load_config(cfg_file, overrides)
    return cfg, checkpoint.load(ckpt_path)


def _select(ds, which: str) -> range:
    if which == "train":
        return ds.train_indices()
    if which == "test":
        return ds.test_indices()
    return range(len(ds))


def perfect_maps(positions: np.ndarray, grid_shape):
    """Saturated logits at ground-truth cells and exact sub-cell offsets."""
    _, off, cells = gaussian_targets(positions, grid_shape, 1)
    heat = np.full((1,) + tuple(grid_shape), -30.0)
    for c, r in cells:
        heat[0, r, c] = 30.0
    return heat, off


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out or Path(cfg.output_dir) / "data")
    write_dataset(cfg.scene, args.frames, out)
    print(f"wrote {args.frames if args.frames is not None else cfg.scene.n_frames} frames to {out}")
    return 0


def cmd_train(args, cfg: ExperimentConfig) -> int:
    ds = read_dataset(args.data)
    cfg = _scene_from_dataset(cfg, ds)
    out = Path(args.out or cfg.output_dir)
    cfg = replace(cfg, output_dir=str(out))
    rig = Rig.build(ds.calibrations, ds.config.grid, cfg.model.D, cfg.model.dz)
    res = run_training(cfg, _frames(ds, ds.train_indices()), _frames(ds, ds.test_indices()), rig, out)
    rep = res["report"]
    print(f"final test moda {rep.moda:.4f} modp {rep.modp:.4f}; best epoch {res['best']['epoch']} -> {out}")
    return 0


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    ds = read_dataset(args.data)
    frames = _frames(ds, _select(ds, args.split))
    if args.perfect:
        m = cfg.metric.resolved(ds.config.cell_size)
        ev = Evaluator(m.t)
        for s in frames:
            heat, off = perfect_maps(s.positions, ds.config.grid.shape)
            ev.add(s.frame_index, decode(heat, off, m.threshold, m.nms_radius), s.positions)
        rep = ev.report()
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint (or --perfect)")
        ckpt = Path(args.checkpoint)
        cfg, params = _load_run(ckpt, args.config, args.set)
        rig = Rig.build(ds.calibrations, ds.config.grid, cfg.model.D, cfg.model.dz)
        m = cfg.metric.resolved(ds.config.cell_size)
        ev = Evaluator(m.t)
        rep = evaluate(frames, params, rig, cfg.model, cfg.metric, ev)
    out = Path(args.out) if args.out else (Path(args.checkpoint).parent / "eval.json" if args.checkpoint else Path("eval.json"))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, rep)
    if args.csv:
        ev.write_csv(args.csv)
    print(json.dumps(rep.to_json(), sort_keys=True))
    return 0


def axis_override(axis: str, value: str) -> List[str]:
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {AXES}")
    if axis == "homographies":
        return [f"model.D={int(value)}", "model.K=null"]
    if axis == "topk":
        return [f"model.K={int(value)}"]
    if axis == "gates":
        return [f"model.gates={json.dumps(value.replace('-only', ''))}"]
    if axis == "dz":
        return [f"model.dz={float(value)}"]
    return [f"model.perview_loss={json.dumps(value)}"]


def _ablate_run(job) -> dict:
    cfg_json, data, run_dir = job
    cfg = ExperimentConfig.from_json(cfg_json)
    ds = read_dataset(data)
    rig = Rig.build(ds.calibrations, ds.config.grid, cfg.model.D, cfg.model.dz)
    res = run_training(cfg, _frames(ds, ds.train_indices()), _frames(ds, ds.test_indices()), rig, Path(run_dir))
    return res["report"].to_json()


def write_table(rows: Sequence[dict], axis: str, csv_path: Path, md_path: Path) -> None:
    cols = [axis] + list(TABLE_FIELDS)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] for c in cols])
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        cells = [str(r[axis])] + [f"{100 * r[c]:.1f}" for c in TABLE_FIELDS[:4]] + [str(r[c]) for c in TABLE_FIELDS[4:]]
        lines.append("| " + " | ".join(cells) + " |")
    md_path.write_text("\n".join(lines) + "\n")


def cmd_ablate(args, cfg: ExperimentConfig) -> int:
    values = args.values.split(",") if args.values else DEFAULT_VALUES.get(args.axis, [])
    if args.axis not in AXES:
        raise ConfigError(f"unknown ablation axis {args.axis!r}; choose from {AXES}")
    values = [v.strip() for v in values if v.strip()]
    if not values:
        raise ConfigError("no ablation values given")
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.data:
        ds = read_dataset(args.data)
        data = Path(args.data)
    else:
        data = out / "data"
        if not (data / "config.json").is_file():
            write_dataset(cfg.scene, None, data)
        ds = read_dataset(data)
    base = _scene_from_dataset(cfg, ds)
    jobs = []
    for v in values:
        try:
            run_cfg = apply_overrides(base, axis_override(args.axis, v))
        except ValueError as exc:
            raise ConfigError(f"invalid {args.axis} value {v!r}: {exc}") from None
        run_dir = out / f"{args.axis}_{v.replace('+', '_')}"
        run_cfg = replace(run_cfg, output_dir=str(run_dir))
        jobs.append((run_cfg.to_json(), str(data), str(run_dir)))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(_ablate_run, jobs))
    else:
        reports = [_ablate_run(j) for j in jobs]
    rows = []
    for v, rep in zip(values, reports):
        rows.append({args.axis: v, **{k: rep[k] for k in TABLE_FIELDS}})
    write_table(rows, args.axis, out / f"ablate_{args.axis}.csv", out / f"ablate_{args.axis}.md")
    print((out / f"ablate_{args.axis}.md").read_text(), end="")
    return 0


def cmd_analyze(args, cfg: ExperimentConfig) -> int:
    ckpt = Path(args.checkpoint)
    cfg, params = _load_run(ckpt, args.config, args.set)
    ds = read_dataset(args.data)
    idx = list(_select(ds, args.split))
    if args.frames is not None:
        idx = idx[: args.frames]
    rig = Rig.build(ds.calibrations, ds.config.grid, cfg.model.D, cfg.model.dz)
    st = collect(_frames(ds, idx), params, rig, cfg.model)
    out = Path(args.out or ckpt.parent / "analysis")
    summary = write_analysis(st, out, ds.config.image_size)
    print(f"analysed {st.frames} frames; mean jaccard between homographies "
          f"{summary['mean_jaccard_between_homographies']} -> {out}")
    return 0


def cmd_split_eval(args, cfg: ExperimentConfig) -> int:
    try:
        split = [int(v) for v in args.split.split(",")]
    except ValueError:
        raise ConfigError(f"--split must be comma-separated camera ids, got {args.split!r}") from None
    out = Path(args.out or cfg.output_dir)
    if args.data:
        ds = read_dataset(args.data)
    else:
        data = out / "data"
        if not (data / "config.json").is_file():
            write_dataset(cfg.scene, None, data)
        ds = read_dataset(data)
    cfg = _scene_from_dataset(cfg, ds)
    try:
        train_setup, test_setup = camera_split(ds.config, split, ds.calibrations)
    except SimulationError as exc:
        raise ConfigError(f"invalid camera split: {exc}") from None
    cams = ds.calibrations
    rig_a = Rig.build([cams[i] for i in train_setup.camera_ids], train_setup.grid, cfg.model.D, cfg.model.dz)
    rig_b = Rig.build([cams[i] for i in test_setup.camera_ids], test_setup.grid, cfg.model.D, cfg.model.dz)
    train_frames = [train_setup.select(ds[k]) for k in ds.train_indices()]
    test_a = [train_setup.select(ds[k]) for k in ds.test_indices()]
    test_b = [test_setup.select(ds[k]) for k in ds.test_indices()]
    res = run_training(replace(cfg, output_dir=str(out)), train_frames, test_a, rig_a, out)
    params = checkpoint.load(out / "last.bin")
    rep_a = res["report"]
    rep_b = evaluate(test_b, params, rig_b, cfg.model, cfg.metric)
    write_report(out / "report_train_half.json", rep_a)
    write_report(out / "report_test_half.json", rep_b)
    _write_json(out / "split.json", {
        "train_cameras": train_setup.camera_ids, "train_col_offset": train_setup.col_offset,
        "test_cameras": test_setup.camera_ids, "test_col_offset": test_setup.col_offset,
        "train_half_moda": rep_a.moda, "test_half_moda": rep_b.moda,
    })
    if rep_a.moda < rep_b.moda:
        log.warning("test-half MODA %.4f exceeds train-half MODA %.4f", rep_b.moda, rep_a.moda)
    print(f"train half {train_setup.camera_ids} moda {rep_a.moda:.4f}; test half {test_setup.camera_ids} moda {rep_b.moda:.4f}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mvagg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")

    sp = sub.add_parser("simulate", help="render a synthetic dataset")
    common(sp)
    sp.add_argument("--out", help="dataset directory (default <output_dir>/data)")
    sp.add_argument("--frames", type=int, help="frame count (default n_train + n_test)")
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("train", help="train one model")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", help="run directory (default output_dir)")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=("train", "test", "all"), default="test")
    sp.add_argument("--out", help="report JSON path")
    sp.add_argument("--csv", help="per-frame CSV path")
    sp.add_argument("--perfect", action="store_true", help="score ground-truth heatmaps instead of a model")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="one run per axis value, tabulated")
    common(sp)
    sp.add_argument("--axis", required=True, choices=AXES)
    sp.add_argument("--values", help="comma-separated values (default: the standard sweep)")
    sp.add_argument("--data", help="dataset (simulated into <out>/data when absent)")
    sp.add_argument("--out")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("analyze", help="attention statistics and maps")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=("train", "test", "all"), default="test")
    sp.add_argument("--frames", type=int, help="limit the number of frames")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_analyze)

    sp = sub.add_parser("split-eval", help="train on a camera split, test on the complement")
    common(sp)
    sp.add_argument("--split", required=True, help="training camera ids, e.g. 0,1")
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_split_eval)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a command is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = load_config(args.config, args.set)
        return args.fn(args, cfg)
    except UsageError as exc:
        print(f"mvagg: usage error: {exc}", file=sys.stderr)
        return USAGE
    except USAGE_ERRORS as exc:
        print(f"mvagg: invalid configuration: {exc}", file=sys.stderr)
        return USAGE
    except RUNTIME_ERRORS as exc:
        print(f"mvagg: error: {exc}", file=sys.stderr)
        return RUNTIME


if __name__ == "__main__":
    sys.exit(main())
