"""Heatmap decoding and MODA / MODP / precision / recall."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

# match threshold of 20 cells at 2.5 cm, i.e. a 0.5 m physical radius
REFERENCE_T_CELLS = 20
REFERENCE_CELL_SIZE = 0.025


def default_threshold_cells(cell_size: float) -> float:
    return REFERENCE_T_CELLS * REFERENCE_CELL_SIZE / cell_size


@dataclass
class MetricConfig:
    t: Optional[float] = None  # match threshold in cells; None -> scaled from the cell size
    threshold: float = 0.4
    nms_radius: Optional[float] = None  # None -> t / 2

    def resolved(self, cell_size: float) -> "MetricConfig":
        t = self.t if self.t is not None else default_threshold_cells(cell_size)
        r = self.nms_radius if self.nms_radius is not None else t / 2
        return MetricConfig(t=t, threshold=self.threshold, nms_radius=r)


@dataclass(frozen=True)
class Detection:
    grid_x: float
    grid_y: float
    score: float


def _sigmoid64(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def nms(points: np.ndarray, order_keys: np.ndarray, radius: float) -> List[int]:
    """Greedy suppression; returns kept indices in descending key order.

    Ties in the key go to the lower index.
    """
    order = np.lexsort((np.arange(len(order_keys)), -np.asarray(order_keys, dtype=np.float64)))
    alive = np.ones(len(order), dtype=bool)
    pts = np.asarray(points, dtype=np.float64)[order]
    keep = []
    r2 = radius * radius
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(int(order[i]))
        d2 = ((pts[i + 1:] - pts[i]) ** 2).sum(axis=1)
        alive[i + 1:] &= d2 > r2
    return keep


def decode(
    heatmap,
    offsets=None,
    threshold: float = 0.4,
    nms_radius: float = 2.5,
) -> List[Detection]:
    """Threshold sigmoid scores of a [1,rows,cols] logit map and suppress neighbours."""
    logits = np.asarray(getattr(heatmap, "data", heatmap), dtype=np.float64)
    logits = logits.reshape(logits.shape[-2:])
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if nms_radius <= 0:
        raise ValueError("nms_radius must be positive")
    rows, cols = logits.shape
    cut = math.log(threshold / (1.0 - threshold))
    scores = _sigmoid64(logits)
    rr, cc = np.nonzero((logits >= cut) & (scores >= threshold))
    if len(rr) == 0:
        return []
    keys = logits[rr, cc]
    pts = np.column_stack([cc, rr]).astype(np.float64)
    keep = nms(pts, keys, nms_radius)
    off = None if offsets is None else np.asarray(getattr(offsets, "data", offsets), dtype=np.float64)
    dets = []
    for k in keep:
        r, c = int(rr[k]), int(cc[k])
        x, y = float(c), float(r)
        if off is not None:
            x = min(max(x + off[0, r, c], 0.0), cols - 1.0)
            y = min(max(y + off[1, r, c], 0.0), rows - 1.0)
        dets.append(Detection(x, y, float(scores[r, c])))
    return dets


@dataclass
class MatchResult:
    pairs: List[Tuple[int, int, float]] = field(default_factory=list)  # (detection, gt, distance)
    false_positives: List[int] = field(default_factory=list)
    false_negatives: List[int] = field(default_factory=list)

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.false_positives)

    @property
    def fn(self) -> int:
        return len(self.false_negatives)


def match(detections: Sequence[Detection], ground_truth, t: float) -> MatchResult:
    """Greedy matching: by descending score, each detection takes its nearest
    unmatched ground truth strictly closer than ``t``."""
    if t <= 0:
        raise ValueError("t must be positive")
    gt = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 2)
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    taken = np.zeros(len(gt), dtype=bool)
    res = MatchResult()
    for i in order:
        det = detections[i]
        if len(gt):
            d = np.hypot(gt[:, 0] - det.grid_x, gt[:, 1] - det.grid_y)
            d[taken] = np.inf
            j = int(np.argmin(d))
            if d[j] < t:
                taken[j] = True
                res.pairs.append((i, j, float(d[j])))
                continue
        res.false_positives.append(i)
    res.false_negatives = [j for j in range(len(gt)) if not taken[j]]
    return res


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    moda: float
    modp: float
    precision: float
    recall: float
    t: float
    frames: int = 1
    flags: List[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.tp + self.fn

    def to_json(self) -> dict:
        return {
            "moda": self.moda,
            "modp": self.modp,
            "precision": self.precision,
            "recall": self.recall,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "t": self.t,
            "frames": self.frames,
            "flags": list(self.flags),
        }


def report_from_counts(tp: int, fp: int, fn: int, n: int, closeness: float, t: float, frames: int = 1) -> EvalReport:
    """``closeness`` is the summed (1 - d/t) over matched pairs."""
    flags = []
    if n == 0:
        if fp > 0:
            moda = float("nan")
            flags.append("moda_undefined: no ground truth but false positives present")
        else:
            moda = 1.0
        recall = 1.0
    else:
        moda = 1.0 - (fp + fn) / n
        recall = tp / n
    precision = tp / (tp + fp) if tp + fp else 1.0
    modp = closeness / tp if tp else 0.0
    return EvalReport(tp, fp, fn, moda, modp, precision, recall, t, frames, flags)


def score(result: MatchResult, n: int, t: float) -> EvalReport:
    if n < 0:
        raise ValueError("n must be non-negative")
    closeness = sum(1.0 - d / t for _, _, d in result.pairs if d < t)
    return report_from_counts(result.tp, result.fp, result.fn, n, closeness, t)


class Evaluator:
    """Accumulates per-frame matches into one dataset-level report."""

    def __init__(self, t: float):
        self.t = t
        self.rows: List[Tuple[int, int, int, int]] = []
        self.closeness = 0.0

    def add(self, frame: int, detections: Sequence[Detection], ground_truth) -> MatchResult:
        res = match(detections, ground_truth, self.t)
        self.rows.append((frame, res.tp, res.fp, res.fn))
        self.closeness += sum(1.0 - d / self.t for _, _, d in res.pairs)
        return res

    def report(self) -> EvalReport:
        tp = sum(r[1] for r in self.rows)
        fp = sum(r[2] for r in self.rows)
        fn = sum(r[3] for r in self.rows)
        return report_from_counts(tp, fp, fn, tp + fn, self.closeness, self.t, len(self.rows))

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "tp", "fp", "fn"])
            w.writerows(self.rows)


def write_report(path: Union[str, Path], report: EvalReport) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))
