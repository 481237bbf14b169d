"""Synthetic multi-camera pedestrian scenes with exact ground truth.

Pedestrians are rendered as three vertically stacked Gaussian blobs (foot,
mid, head) per camera, composited far-to-near so nearer people occlude
farther ones. Everything is a pure function of the config seed and the frame
index.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import geometry as geo
from .geometry import CameraCalibration, GroundGrid


class SimulationError(RuntimeError):
    pass


class DatasetError(RuntimeError):
    pass


# blob heights as fractions of pedestrian height, and blob radius multipliers
BLOBS = ((0.12, 0.8), (0.5, 1.0), (0.88, 0.6))
BACKGROUND = (0.25, 0.25, 0.25)


@dataclass
class SceneConfig:
    n_cameras: int = 4
    rows: int = 48
    cols: int = 72
    cell_size: float = 0.1
    ped_min: int = 8
    ped_max: int = 12
    ped_height: float = 1.8
    ped_radius: float = 0.25
    min_separation: float = 0.5
    cam_height_min: float = 2.5
    cam_height_max: float = 3.5
    cam_margin: float = 1.5
    look_jitter: float = 0.3
    hfov_deg: float = 90.0
    image_h: int = 96
    image_w: int = 160
    n_train: int = 200
    n_test: int = 50
    seed: int = 0

    @property
    def image_size(self) -> Tuple[int, int]:
        return (self.image_h, self.image_w)

    @property
    def grid(self) -> GroundGrid:
        return GroundGrid(self.rows, self.cols, self.cell_size)

    @property
    def n_frames(self) -> int:
        return self.n_train + self.n_test

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "SceneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise DatasetError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class FrameSample:
    frame_index: int
    images: List[np.ndarray]  # uint8 [3,H,W] per camera
    positions: np.ndarray  # (M, 2) grid coordinates (gx, gy)
    foot_px: np.ndarray  # (N_cam, M, 2); NaN where the point is behind the camera
    head_px: np.ndarray
    calibrations: List[CameraCalibration] = field(default_factory=list, repr=False)

    @property
    def n_people(self) -> int:
        return len(self.positions)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FrameSample):
            return NotImplemented
        return (
            self.frame_index == other.frame_index
            and len(self.images) == len(other.images)
            and all(np.array_equal(a, b) for a, b in zip(self.images, other.images))
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.foot_px, other.foot_px, equal_nan=True)
            and np.array_equal(self.head_px, other.head_px, equal_nan=True)
        )


# --------------------------------------------------------------------------
# Cameras


def make_cameras(config: SceneConfig) -> List[CameraCalibration]:
    rng = np.random.default_rng([config.seed, 7919])
    w_m = (config.cols - 1) * config.cell_size
    h_m = (config.rows - 1) * config.cell_size
    cx, cy = w_m / 2, h_m / 2
    f = 0.5 * config.image_w / math.tan(math.radians(config.hfov_deg) / 2)
    g = np.array([[f, 0.0, (config.image_w - 1) / 2], [0.0, f, (config.image_h - 1) / 2], [0.0, 0.0, 1.0]])
    cams = []
    for i in range(config.n_cameras):
        ang = 2 * math.pi * i / config.n_cameras + math.pi / config.n_cameras + rng.uniform(-0.15, 0.15)
        px = cx + (w_m / 2 + config.cam_margin) * math.cos(ang)
        py = cy + (h_m / 2 + config.cam_margin) * math.sin(ang)
        pz = rng.uniform(config.cam_height_min, config.cam_height_max)
        target = (cx + rng.uniform(-1, 1) * config.look_jitter, cy + rng.uniform(-1, 1) * config.look_jitter, 0.0)
        cams.append(geo.look_at((px, py, pz), target, g, config.image_size))
    return cams


def visible(cal: CameraCalibration, world_pts: np.ndarray) -> np.ndarray:
    """Mask of (M,3) world points in front of the camera and inside its image."""
    pts = np.atleast_2d(world_pts)
    depth = geo.camera_depth(cal, pts)
    hom = np.column_stack([pts, np.ones(len(pts))]) @ cal.projection.T
    with np.errstate(divide="ignore", invalid="ignore"):
        u = hom[:, 0] / hom[:, 2]
        v = hom[:, 1] / hom[:, 2]
    h, w = cal.image_size
    return (depth > 1e-6) & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)


def coverage(cals: Sequence[CameraCalibration], grid: GroundGrid) -> np.ndarray:
    """Number of cameras seeing each grid point on the ground, [rows, cols]."""
    gy, gx = np.mgrid[0:grid.rows, 0:grid.cols]
    world = grid.grid_to_world(np.column_stack([gx.ravel(), gy.ravel()]))
    pts = np.column_stack([world, np.zeros(len(world))])
    counts = np.zeros(len(pts), dtype=np.int64)
    for cal in cals:
        counts += visible(cal, pts)
    return counts.reshape(grid.rows, grid.cols)


# --------------------------------------------------------------------------
# Rendering


def _project(cal: CameraCalibration, pts: np.ndarray) -> np.ndarray:
    hom = np.column_stack([pts, np.ones(len(pts))]) @ cal.projection.T
    depth = geo.camera_depth(cal, pts)
    out = hom[:, :2] / hom[:, 2:3]
    out[depth <= 1e-6] = np.nan
    return out


def render_view(cal: CameraCalibration, world_xy: np.ndarray, colors: np.ndarray, config: SceneConfig) -> np.ndarray:
    h, w = config.image_size
    img = np.empty((3, h, w), dtype=np.float64)
    img[:] = np.asarray(BACKGROUND)[:, None, None]
    if len(world_xy):
        f = cal.intrinsic[0, 0]
        feet = np.column_stack([world_xy, np.zeros(len(world_xy))])
        order = np.argsort(-geo.camera_depth(cal, feet), kind="stable")
        vv, uu = np.mgrid[0:h, 0:w]
        for p in order:
            shade = colors[p]
            for level, (frac, rmul) in enumerate(BLOBS):
                centre = np.array([[world_xy[p, 0], world_xy[p, 1], frac * config.ped_height]])
                depth = geo.camera_depth(cal, centre)[0]
                if depth <= 0.05:
                    continue
                u, v = _project(cal, centre)[0]
                sigma = max(0.6, f * config.ped_radius * rmul / depth)
                if sigma > 4 * max(h, w):
                    continue
                reach = 3 * sigma
                if u + reach < 0 or u - reach > w - 1 or v + reach < 0 or v - reach > h - 1:
                    continue
                y0, y1 = max(0, int(v - reach)), min(h, int(v + reach) + 2)
                x0, x1 = max(0, int(u - reach)), min(w, int(u + reach) + 2)
                d2 = (uu[y0:y1, x0:x1] - u) ** 2 + (vv[y0:y1, x0:x1] - v) ** 2
                alpha = 0.95 * np.exp(-0.5 * d2 / sigma**2)
                tone = shade * (0.7 + 0.15 * level)
                patch = img[:, y0:y1, x0:x1]
                img[:, y0:y1, x0:x1] = patch * (1 - alpha) + np.minimum(tone, 1.0)[:, None, None] * alpha
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def _place(config: SceneConfig, cams, rng: np.random.Generator, count: int) -> np.ndarray:
    grid = config.grid
    min_sep = config.min_separation / config.cell_size
    placed: List[Tuple[float, float]] = []
    cells = set()
    attempts = 0
    margin = 1.0
    while len(placed) < count:
        attempts += 1
        if attempts > 1000:
            raise SimulationError(f"could not place {count} pedestrians in 1000 attempts")
        gx = rng.uniform(margin, config.cols - 1 - margin)
        gy = rng.uniform(margin, config.rows - 1 - margin)
        cell = (int(round(gx)), int(round(gy)))
        if cell in cells:
            continue
        if any((gx - px) ** 2 + (gy - py) ** 2 < min_sep**2 for px, py in placed):
            continue
        world = grid.grid_to_world([[gx, gy]])[0]
        foot = np.array([[world[0], world[1], 0.0]])
        if not any(visible(cal, foot)[0] for cal in cams):
            continue
        placed.append((gx, gy))
        cells.add(cell)
    return np.array(placed, dtype=np.float64).reshape(-1, 2)


def generate_scene(
    config: SceneConfig,
    frame_index: int,
    positions: Optional[np.ndarray] = None,
    cameras: Optional[List[CameraCalibration]] = None,
) -> FrameSample:
    """Sample and render one frame; ``positions`` (grid coords) overrides sampling."""
    cams = cameras if cameras is not None else make_cameras(config)
    rng = np.random.default_rng([config.seed, 104729, frame_index])
    if positions is None:
        count = int(rng.integers(config.ped_min, config.ped_max + 1))
        positions = _place(config, cams, rng, count)
    else:
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    colors = rng.uniform(0.35, 1.0, size=(len(positions), 3))
    grid = config.grid
    world_xy = grid.grid_to_world(positions) if len(positions) else np.zeros((0, 2))
    images = [render_view(cal, world_xy, colors, config) for cal in cams]
    m = len(positions)
    foot = np.full((len(cams), m, 2), np.nan)
    head = np.full((len(cams), m, 2), np.nan)
    if m:
        feet3 = np.column_stack([world_xy, np.zeros(m)])
        heads3 = np.column_stack([world_xy, np.full(m, config.ped_height)])
        for i, cal in enumerate(cams):
            foot[i] = _project(cal, feet3)
            head[i] = _project(cal, heads3)
    return FrameSample(frame_index, images, positions, foot, head, cams)


# --------------------------------------------------------------------------
# Disk format


def write_ppm(path: Union[str, Path], img: np.ndarray) -> None:
    """Binary P6 from a uint8 [3,H,W] array."""
    c, h, w = img.shape
    if c != 3 or img.dtype != np.uint8:
        raise DatasetError("PPM images must be uint8 [3,H,W]")
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes())


def write_pgm(path: Union[str, Path], img: np.ndarray) -> None:
    """Binary P5 from a uint8 [H,W] array."""
    if img.ndim != 2 or img.dtype != np.uint8:
        raise DatasetError("PGM images must be uint8 [H,W]")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes())


def _read_pnm(path: Union[str, Path], magic: bytes, channels: int) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated header")
        tokens.append(blob[start:pos])
    pos += 1
    if tokens[0] != magic or tokens[3] != b"255":
        raise DatasetError(f"{path}: unsupported image format")
    w, h = int(tokens[1]), int(tokens[2])
    data = blob[pos:]
    if len(data) != w * h * channels:
        raise DatasetError(f"{path}: expected {w * h * channels} pixel bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(h, w).copy()
    return arr.reshape(h, w, channels).transpose(2, 0, 1).copy()


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


def _px(v) -> Optional[List[float]]:
    return None if np.any(np.isnan(v)) else [float(v[0]), float(v[1])]


def frame_gt_json(sample: FrameSample) -> list:
    out = []
    for j, (gx, gy) in enumerate(sample.positions):
        views = [{"foot_px": _px(sample.foot_px[i, j]), "head_px": _px(sample.head_px[i, j])} for i in range(len(sample.images))]
        out.append({"grid_x": float(gx), "grid_y": float(gy), "views": views})
    return out


def write_frame(root: Path, sample: FrameSample) -> None:
    fdir = root / "frames" / f"{sample.frame_index:05d}"
    fdir.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(sample.images):
        write_ppm(fdir / f"cam_{i}.ppm", img)
    (fdir / "gt.json").write_text(json.dumps(frame_gt_json(sample)))


def write_dataset(config: SceneConfig, n_frames: Optional[int], path: Union[str, Path]) -> Path:
    root = Path(path)
    n = config.n_frames if n_frames is None else int(n_frames)
    (root / "calibrations").mkdir(parents=True, exist_ok=True)
    meta = config.to_json()
    meta["frames"] = n
    (root / "config.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    cams = make_cameras(config)
    for i, cal in enumerate(cams):
        geo.save_calibration(root / "calibrations" / f"cam_{i}.json", cal)
    for k in range(n):
        write_frame(root, generate_scene(config, k, cameras=cams))
    return root


class Dataset:
    """Lazily loaded dataset directory."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        cfg_path = self.root / "config.json"
        if not cfg_path.is_file():
            raise DatasetError(f"{self.root}: missing config.json")
        try:
            meta = json.loads(cfg_path.read_text())
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{cfg_path}: {exc}") from None
        self.n_frames = int(meta.pop("frames", -1))
        self.config = SceneConfig.from_json(meta)
        self.calibrations = []
        for i in range(self.config.n_cameras):
            p = self.root / "calibrations" / f"cam_{i}.json"
            if not p.is_file():
                raise DatasetError(f"missing calibration {p}")
            self.calibrations.append(geo.load_calibration(p))
        frames_dir = self.root / "frames"
        present = sorted(p.name for p in frames_dir.iterdir()) if frames_dir.is_dir() else []
        expected = [f"{k:05d}" for k in range(self.n_frames)]
        if present != expected:
            raise DatasetError(f"{self.root}: frame directory listing does not match config ({len(present)} of {self.n_frames})")

    def __len__(self) -> int:
        return self.n_frames

    def __getitem__(self, k: int) -> FrameSample:
        if not 0 <= k < self.n_frames:
            raise IndexError(k)
        fdir = self.root / "frames" / f"{k:05d}"
        n_cam = self.config.n_cameras
        try:
            images = [read_ppm(fdir / f"cam_{i}.ppm") for i in range(n_cam)]
            gt = json.loads((fdir / "gt.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"{fdir}: {exc}") from None
        m = len(gt)
        pos = np.array([[g["grid_x"], g["grid_y"]] for g in gt], dtype=np.float64).reshape(m, 2)
        foot = np.full((n_cam, m, 2), np.nan)
        head = np.full((n_cam, m, 2), np.nan)
        for j, g in enumerate(gt):
            if len(g["views"]) != n_cam:
                raise DatasetError(f"{fdir}/gt.json: entry {j} has {len(g['views'])} views")
            for i, view in enumerate(g["views"]):
                if view["foot_px"] is not None:
                    foot[i, j] = view["foot_px"]
                if view["head_px"] is not None:
                    head[i, j] = view["head_px"]
        return FrameSample(k, images, pos, foot, head, self.calibrations)

    def __iter__(self) -> Iterator[FrameSample]:
        for k in range(self.n_frames):
            yield self[k]

    def train_indices(self) -> range:
        return range(min(self.config.n_train, self.n_frames))

    def test_indices(self) -> range:
        return range(min(self.config.n_train, self.n_frames), self.n_frames)


def read_dataset(path: Union[str, Path]) -> Dataset:
    return Dataset(path)


# --------------------------------------------------------------------------
# Camera splits


@dataclass
class SplitSetup:
    camera_ids: List[int]
    grid: GroundGrid
    col_offset: int

    def select(self, sample: FrameSample) -> FrameSample:
        """Restrict a frame to this setup's cameras and grid half."""
        gx = sample.positions[:, 0] - self.col_offset
        # halves own whole cells, so every pedestrian lands in exactly one
        cell = np.rint(gx)
        keep = (cell >= 0) & (cell <= self.grid.cols - 1)
        pos = np.column_stack([gx[keep], sample.positions[keep, 1]])
        ids = self.camera_ids
        return FrameSample(
            sample.frame_index,
            [sample.images[i] for i in ids],
            pos,
            sample.foot_px[ids][:, keep] if len(ids) else sample.foot_px[:0],
            sample.head_px[ids][:, keep] if len(ids) else sample.head_px[:0],
            [sample.calibrations[i] for i in ids] if sample.calibrations else [],
        )


def camera_split(
    config: SceneConfig, split: Sequence[int], cameras: Optional[List[CameraCalibration]] = None
) -> Tuple[SplitSetup, SplitSetup]:
    """Training setup for ``split`` cameras on one grid half; test setup for the rest.

    The grid is halved along its columns. The training half is the one the
    split cameras cover more than the complement does, so swapping the split
    swaps the halves.
    """
    cams = cameras if cameras is not None else make_cameras(config)
    split_ids = sorted(set(int(i) for i in split))
    if not split_ids or len(split_ids) >= len(cams) or any(not 0 <= i < len(cams) for i in split_ids):
        raise SimulationError(f"split must be a non-empty proper subset of cameras 0..{len(cams) - 1}")
    if config.cols % 2:
        raise SimulationError("grid columns must be even to halve the grid")
    rest = [i for i in range(len(cams)) if i not in split_ids]
    grid = config.grid
    half = config.cols // 2
    cov_a = coverage([cams[i] for i in split_ids], grid)
    cov_b = coverage([cams[i] for i in rest], grid)
    diff = cov_a - cov_b
    left_pref = diff[:, :half].sum() - diff[:, half:].sum()
    train_off, test_off = (0, half) if left_pref >= 0 else (half, 0)
    for ids, cov, off in ((split_ids, cov_a, train_off), (rest, cov_b, test_off)):
        if cov[:, off:off + half].sum() == 0:
            raise SimulationError(f"cameras {ids} cover no part of their grid half")

    def setup(ids, off):
        origin = (grid.origin[0] + off * grid.cell_size, grid.origin[1])
        return SplitSetup(list(ids), GroundGrid(grid.rows, half, grid.cell_size, origin), off)

    return setup(split_ids, train_off), setup(rest, test_off)
