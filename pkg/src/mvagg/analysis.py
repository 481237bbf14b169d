"""Attention introspection: selection frequencies, averaged maps, overlap summaries.

Outputs written by :func:`write_analysis` into one directory::

    selection_cam{i}.csv        C x D selection fractions for camera i
    selection_all.csv           same, pooled over cameras
    channel_cam{i}_h{d}.pgm     mean top-K channel output, image resolution
    spatial_cam{i}_h{d}.pgm     mean spatial attention map, image resolution
    spatial_h{d}.pgm            spatial attention averaged over cameras
    feature_cam{i}.pgm          mean extractor activation
    summary.json                majority sets, Jaccard overlaps, plane heights

Every frame selects exactly K channels per homography, so each column of a
fraction table sums to K.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .pipeline.model import Params, PipelineConfig
from .pipeline.training import Rig, predict
from .simulator import FrameSample, write_pgm


class AnalysisError(RuntimeError):
    pass


@dataclass
class AttentionStats:
    C: int
    D: int
    K: int
    dz: float
    frames: int = 0
    counts: np.ndarray = None  # [cams, C, D] selection counts
    channel_maps: List[List[np.ndarray]] = field(default_factory=list)  # [cam][d] summed
    spatial_maps: List[List[Optional[np.ndarray]]] = field(default_factory=list)
    feature_maps: List[np.ndarray] = field(default_factory=list)

    def fractions(self, cam: Optional[int] = None) -> np.ndarray:
        """[C, D] fraction of frames selecting each channel; pooled when cam is None."""
        if self.frames == 0:
            raise AnalysisError("no frames accumulated")
        if cam is None:
            return self.counts.sum(axis=0) / (self.frames * self.counts.shape[0])
        return self.counts[cam] / self.frames


def collect(frames: Sequence[FrameSample], params: Params, rig: Rig, config: PipelineConfig) -> AttentionStats:
    ham = config.ham
    if ham is None:
        raise AnalysisError("model has no attention module (gates=none)")
    n_cam = rig.n_views
    st = AttentionStats(ham.C, ham.D, ham.out_channels, config.dz)
    st.counts = np.zeros((n_cam, ham.C, ham.D), dtype=np.int64)
    for s in frames:
        out = predict(s, params, rig, config, keep_trace=True)
        for i, tr in enumerate(out.traces):
            for d in range(ham.D):
                idx = np.asarray(tr.indices[d])
                if len(np.unique(idx)) != st.K:
                    raise AnalysisError(f"camera {i} homography {d}: {len(idx)} selections, expected {st.K}")
                st.counts[i, idx, d] += 1
            chan = [tr.channel_outputs[d].astype(np.float64).mean(axis=0) for d in range(ham.D)]
            spat = [None if m is None else m[0].astype(np.float64) for m in tr.spatial_maps]
            feat = out.features[i].data.astype(np.float64).mean(axis=0)
            if st.frames == 0:
                st.channel_maps.append(chan)
                st.spatial_maps.append(spat)
                st.feature_maps.append(feat)
            else:
                st.channel_maps[i] = [a + b for a, b in zip(st.channel_maps[i], chan)]
                st.spatial_maps[i] = [None if a is None else a + b for a, b in zip(st.spatial_maps[i], spat)]
                st.feature_maps[i] = st.feature_maps[i] + feat
        st.frames += 1
    if st.frames == 0:
        raise AnalysisError("no frames to analyse")
    return st


def majority_set(fractions: np.ndarray) -> List[List[int]]:
    """Per homography, channels selected in more than half of the frames."""
    return [sorted(int(c) for c in np.flatnonzero(fractions[:, d] > 0.5)) for d in range(fractions.shape[1])]


def jaccard(a: Sequence[int], b: Sequence[int]) -> float:
    sa, sb = set(a), set(b)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def to_gray(arr: np.ndarray, lo: Optional[float] = None, hi: Optional[float] = None) -> np.ndarray:
    """Min-max scale to uint8; a constant map becomes all zeros."""
    a = np.asarray(arr, dtype=np.float64)
    lo = float(a.min()) if lo is None else lo
    hi = float(a.max()) if hi is None else hi
    if hi - lo <= 0:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.clip(np.rint((a - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


def upsample(arr: np.ndarray, shape) -> np.ndarray:
    """Nearest-neighbour upsampling by an integer factor per axis."""
    fy, fx = shape[0] // arr.shape[0], shape[1] // arr.shape[1]
    if fy * arr.shape[0] != shape[0] or fx * arr.shape[1] != shape[1]:
        raise AnalysisError(f"cannot upsample {arr.shape} to {tuple(shape)}")
    return np.repeat(np.repeat(arr, fy, axis=0), fx, axis=1)


def _write_table(path: Path, frac: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel"] + [f"h{d}" for d in range(frac.shape[1])])
        for c in range(frac.shape[0]):
            w.writerow([c] + [repr(float(v)) for v in frac[c]])


def read_table(path: Union[str, Path]) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in r[1:]] for r in rows])


def summarize(st: AttentionStats) -> dict:
    n_cam = st.counts.shape[0]
    pooled = majority_set(st.fractions())
    per_cam = [majority_set(st.fractions(i)) for i in range(n_cam)]
    between_h = {f"h{a}-h{b}": jaccard(pooled[a], pooled[b]) for a, b in combinations(range(st.D), 2)}
    across_cams = {}
    for d in range(st.D):
        across_cams[f"h{d}"] = {
            f"cam{a}-cam{b}": jaccard(per_cam[a][d], per_cam[b][d]) for a, b in combinations(range(n_cam), 2)
        }
    off_diag = list(between_h.values())
    return {
        "C": st.C,
        "D": st.D,
        "K": st.K,
        "dz": st.dz,
        "plane_heights": [k * st.dz for k in range(st.D)],
        "frames": st.frames,
        "cameras": n_cam,
        "majority_sets": {f"h{d}": pooled[d] for d in range(st.D)},
        "majority_sets_per_camera": {f"cam{i}": {f"h{d}": per_cam[i][d] for d in range(st.D)} for i in range(n_cam)},
        "jaccard_between_homographies": between_h,
        "mean_jaccard_between_homographies": float(np.mean(off_diag)) if off_diag else None,
        "jaccard_across_cameras": across_cams,
    }


def write_analysis(st: AttentionStats, out_dir: Union[str, Path], image_hw) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_cam = st.counts.shape[0]
    for i in range(n_cam):
        _write_table(out / f"selection_cam{i}.csv", st.fractions(i))
        for d in range(st.D):
            write_pgm(out / f"channel_cam{i}_h{d}.pgm", to_gray(upsample(st.channel_maps[i][d] / st.frames, image_hw)))
            m = st.spatial_maps[i][d]
            if m is not None:
                # sigmoid outputs: fixed [0,1] scale keeps maps comparable
                write_pgm(out / f"spatial_cam{i}_h{d}.pgm", to_gray(upsample(m / st.frames, image_hw), 0.0, 1.0))
        write_pgm(out / f"feature_cam{i}.pgm", to_gray(upsample(st.feature_maps[i] / st.frames, image_hw)))
    _write_table(out / "selection_all.csv", st.fractions())
    for d in range(st.D):
        maps = [st.spatial_maps[i][d] for i in range(n_cam)]
        if all(m is not None for m in maps):
            mean = sum(maps) / (n_cam * st.frames)
            write_pgm(out / f"spatial_h{d}.pgm", to_gray(upsample(mean, image_hw), 0.0, 1.0))
    summary = summarize(st)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary
