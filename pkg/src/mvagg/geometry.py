"""Pinhole cameras, per-height ground-plane homographies and grid warping.

Conventions used throughout:

* World frame: X along grid columns, Y along grid rows, Z up, metres.
* Image pixel ``(u, v)``: ``u`` is the column, ``v`` the row, pixel centres
  at integer coordinates.
* Grid coordinate ``(gx, gy)``: continuous column/row index on the ground
  grid; output cell ``(r, c)`` of a warped map samples grid point ``(c, r)``.
"""
from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .tensor import Tensor, sparse_map

COND_LIMIT = 1e12


class GeometryError(ValueError):
    pass


class PointAtInfinity(GeometryError):
    pass


class SingularMatrixError(GeometryError):
    pass


def inv3(m: np.ndarray) -> np.ndarray:
    """Inverse of a 3x3 matrix via the adjugate, with a condition-number guard."""
    a = np.asarray(m, dtype=np.float64)
    if a.shape != (3, 3):
        raise GeometryError(f"inv3 expects a 3x3 matrix, got {a.shape}")
    adj = np.empty((3, 3))
    adj[0, 0] = a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1]
    adj[0, 1] = a[0, 2] * a[2, 1] - a[0, 1] * a[2, 2]
    adj[0, 2] = a[0, 1] * a[1, 2] - a[0, 2] * a[1, 1]
    adj[1, 0] = a[1, 2] * a[2, 0] - a[1, 0] * a[2, 2]
    adj[1, 1] = a[0, 0] * a[2, 2] - a[0, 2] * a[2, 0]
    adj[1, 2] = a[0, 2] * a[1, 0] - a[0, 0] * a[1, 2]
    adj[2, 0] = a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0]
    adj[2, 1] = a[0, 1] * a[2, 0] - a[0, 0] * a[2, 1]
    adj[2, 2] = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    det = a[0, 0] * adj[0, 0] + a[0, 1] * adj[1, 0] + a[0, 2] * adj[2, 0]
    norm = np.linalg.norm(a)
    if det == 0.0 or not np.isfinite(det):
        raise SingularMatrixError("matrix is singular")
    inv = adj / det
    cond = norm * np.linalg.norm(inv)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularMatrixError(f"matrix is ill-conditioned (cond={cond:.3g})")
    return inv


def apply_h(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply a 3x3 projective map to an (M, 2) array of points."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    hom = np.column_stack([pts, np.ones(len(pts))]) @ np.asarray(h, dtype=np.float64).T
    return hom[:, :2] / hom[:, 2:3]


@dataclass
class CameraCalibration:
    intrinsic: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: Tuple[int, int] = (96, 160)

    def __post_init__(self):
        self.intrinsic = np.asarray(self.intrinsic, dtype=np.float64).reshape(3, 3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        self.validate()

    def validate(self, tol: float = 1e-6) -> None:
        r = self.rotation
        if abs(np.linalg.det(r) - 1.0) >= tol or not np.allclose(r.T @ r, np.eye(3), atol=tol):
            raise GeometryError("rotation is not orthonormal with det 1")
        g = self.intrinsic
        if np.any(np.abs(np.tril(g, -1)) > 0) or g[0, 0] <= 0 or g[1, 1] <= 0:
            raise GeometryError("intrinsic must be upper-triangular with positive focal lengths")

    @property
    def projection(self) -> np.ndarray:
        """G [R | t], 3x4."""
        return self.intrinsic @ np.column_stack([self.rotation, self.translation])

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_json(self) -> dict:
        return {
            "intrinsic": self.intrinsic.reshape(-1).tolist(),
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CameraCalibration":
        for key, n in (("intrinsic", 9), ("rotation", 9), ("translation", 3)):
            if len(obj.get(key, ())) != n:
                raise GeometryError(f"calibration field {key!r} must hold {n} floats")
        return cls(obj["intrinsic"], obj["rotation"], obj["translation"], tuple(obj["image_size"]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, CameraCalibration):
            return NotImplemented
        return (
            np.array_equal(self.intrinsic, other.intrinsic)
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
            and self.image_size == other.image_size
        )


def save_calibration(path: Union[str, Path], cal: CameraCalibration) -> None:
    Path(path).write_text(json.dumps(cal.to_json(), indent=1))


def load_calibration(path: Union[str, Path]) -> CameraCalibration:
    return CameraCalibration.from_json(json.loads(Path(path).read_text()))


def look_at(center, target, intrinsic, image_size) -> CameraCalibration:
    """Calibration for a camera at ``center`` looking at ``target`` with Z up."""
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return CameraCalibration(intrinsic, rot, -rot @ center, image_size)


def world_to_image(cal: CameraCalibration, point) -> Tuple[float, float]:
    """Perspective projection of a world point to pixel coordinates."""
    x = np.append(np.asarray(point, dtype=np.float64), 1.0)
    u, v, w = cal.projection @ x
    if abs(w) < 1e-12 * max(1.0, abs(u), abs(v)):
        raise PointAtInfinity(f"point {tuple(point)} lies on the principal plane")
    return float(u / w), float(v / w)


def camera_depth(cal: CameraCalibration, points: np.ndarray) -> np.ndarray:
    """Z in camera coordinates for an (M, 3) array of world points."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return pts @ cal.rotation[2] + cal.translation[2]


def theta_at_height(cal: CameraCalibration, k: int, dz: float) -> np.ndarray:
    """Plane-induced 3x3 map taking (X, Y, 1) on the plane Z = k*dz to pixels."""
    if k < 0:
        raise GeometryError("height index k must be non-negative")
    p = cal.projection
    return np.column_stack([p[:, 0], p[:, 1], p[:, 3] + k * dz * p[:, 2]])


@dataclass
class GroundGrid:
    rows: int
    cols: int
    cell_size: float
    origin: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.cell_size <= 0:
            raise GeometryError("grid dims and cell size must be positive")
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def F(self) -> np.ndarray:
        s = 1.0 / self.cell_size
        x0, y0 = self.origin
        return np.array([[s, 0.0, -x0 * s], [0.0, s, -y0 * s], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.rows, self.cols

    def world_to_grid(self, xy) -> np.ndarray:
        return apply_h(self.F, xy)

    def grid_to_world(self, gxy) -> np.ndarray:
        return apply_h(inv3(self.F), gxy)

    def contains(self, gx: float, gy: float) -> bool:
        return 0.0 <= gx <= self.cols - 1 and 0.0 <= gy <= self.rows - 1


def homography(grid: GroundGrid, theta: np.ndarray) -> np.ndarray:
    """Image pixel -> grid coordinate map, F @ inv(theta)."""
    return grid.F @ inv3(theta)


@dataclass
class HomographyStack:
    """D image->grid homographies per camera, for planes at heights k*dz."""

    matrices: List[List[np.ndarray]]
    D: int
    dz: float
    grid: GroundGrid = field(repr=False, default=None)

    def __post_init__(self):
        if self.D < 1:
            raise GeometryError("D must be >= 1")

    def for_camera(self, i: int) -> List[np.ndarray]:
        return self.matrices[i]


def build_stack(cals: Sequence[CameraCalibration], grid: GroundGrid, D: int, dz: float) -> HomographyStack:
    mats = [[homography(grid, theta_at_height(cal, k, dz)) for k in range(D)] for cal in cals]
    return HomographyStack(mats, D, dz, grid)


def feature_scale(image_hw: Tuple[int, int], feature_hw: Tuple[int, int]) -> np.ndarray:
    """Map from feature-map pixel coordinates to image pixel coordinates."""
    sy = image_hw[0] / feature_hw[0]
    sx = image_hw[1] / feature_hw[1]
    return np.diag([sx, sy, 1.0])


def feature_homography(h_image: np.ndarray, image_hw, feature_hw) -> np.ndarray:
    return np.asarray(h_image, dtype=np.float64) @ feature_scale(image_hw, feature_hw)


# --------------------------------------------------------------------------
# Bilinear sampling as a sparse linear operator


def bilinear_matrix(
    src_xy: np.ndarray,
    src_hw: Tuple[int, int],
    valid: np.ndarray = None,
    dtype=np.float32,
) -> sp.csr_matrix:
    """Sparse (M, h*w) matrix sampling an h x w map at M points bilinearly.

    Corners outside the source contribute zero; rows flagged invalid are empty.
    """
    h, w = src_hw
    x = src_xy[:, 0]
    y = src_xy[:, 1]
    m = len(src_xy)
    if valid is None:
        valid = np.ones(m, dtype=bool)
    valid = valid & np.isfinite(x) & np.isfinite(y) & (x > -1) & (x < w) & (y > -1) & (y < h)
    rows_out, cols_out, vals = [], [], []
    x0 = np.floor(np.where(valid, x, 0.0)).astype(np.int64)
    y0 = np.floor(np.where(valid, y, 0.0)).astype(np.int64)
    fx = np.where(valid, x, 0.0) - x0
    fy = np.where(valid, y, 0.0) - y0
    ridx = np.arange(m)
    for dy, dx, wt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi = x0 + dx
        yi = y0 + dy
        ok = valid & (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & (wt != 0)
        rows_out.append(ridx[ok])
        cols_out.append(yi[ok] * w + xi[ok])
        vals.append(wt[ok])
    mat = sp.csr_matrix(
        (np.concatenate(vals).astype(dtype), (np.concatenate(rows_out), np.concatenate(cols_out))),
        shape=(m, h * w),
    )
    mat.sum_duplicates()
    return mat


def grid_sample_points(h_feat: np.ndarray, grid_hw: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """Source coordinates of every grid cell under inv(h_feat), plus a validity mask.

    Cells whose preimage has non-positive homogeneous weight lie behind the
    camera and are marked invalid.
    """
    rows, cols = grid_hw
    gy, gx = np.mgrid[0:rows, 0:cols]
    pts = np.column_stack([gx.ravel(), gy.ravel(), np.ones(rows * cols)]).astype(np.float64)
    src = pts @ inv3(h_feat).T
    wgt = src[:, 2]
    valid = wgt > 1e-12
    safe = np.where(valid, wgt, 1.0)
    return src[:, :2] / safe[:, None], valid


@functools.lru_cache(maxsize=256)
def _cached_warp_matrix(key: bytes, src_hw, grid_hw, dtype_name: str):
    h_feat = np.frombuffer(key, dtype=np.float64).reshape(3, 3)
    src, valid = grid_sample_points(h_feat, grid_hw)
    return bilinear_matrix(src, src_hw, valid, dtype=np.dtype(dtype_name))


def warp_matrix(h_feat: np.ndarray, src_hw, grid_hw, dtype=np.float32) -> sp.csr_matrix:
    key = np.ascontiguousarray(h_feat, dtype=np.float64).tobytes()
    return _cached_warp_matrix(key, tuple(src_hw), tuple(grid_hw), np.dtype(dtype).name)


def warp_to_grid(feature: Tensor, h_feat: np.ndarray, grid: GroundGrid) -> Tensor:
    """Project a [C,h,w] feature map onto the ground grid, [C,rows,cols]."""
    if feature.data.ndim != 3:
        raise GeometryError(f"warp_to_grid expects [C,h,w], got {list(feature.shape)}")
    mat = warp_matrix(h_feat, feature.shape[1:], grid.shape, feature.dtype)
    return sparse_map(feature, mat, grid.shape)
