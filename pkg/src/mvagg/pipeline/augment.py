"""View-coherent affine augmentation.

Each view's image is warped by a random affine ``A`` and its image->grid
homographies are replaced by ``H @ inv(A)``, so projecting the augmented
image to the ground grid lands every pixel where the original did. Ground
truth on the grid is untouched; per-view pixel labels move with ``A``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .. import geometry as geo


@dataclass
class AugmentRanges:
    rotation_deg: float = 15.0
    translation: float = 0.1  # fraction of image size
    scale_min: float = 0.9
    scale_max: float = 1.1
    shear_deg: float = 5.0


def affine_matrix(
    image_hw: Tuple[int, int],
    rotation_deg: float = 0.0,
    translation: Tuple[float, float] = (0.0, 0.0),
    scale: float = 1.0,
    shear_deg: float = 0.0,
) -> np.ndarray:
    """3x3 affine acting on pixel coordinates, about the image centre."""
    h, w = image_hw
    cx, cy = (w - 1) / 2, (h - 1) / 2
    th = math.radians(rotation_deg)
    sh = math.tan(math.radians(shear_deg))
    to_c = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    back = np.array([[1, 0, cx + translation[0]], [0, 1, cy + translation[1]], [0, 0, 1.0]])
    rot = np.array([[math.cos(th), -math.sin(th), 0], [math.sin(th), math.cos(th), 0], [0, 0, 1.0]])
    shear = np.array([[1, sh, 0], [0, 1, 0], [0, 0, 1.0]])
    sc = np.diag([scale, scale, 1.0])
    return back @ rot @ shear @ sc @ to_c


def random_affine(image_hw, ranges: AugmentRanges, rng: np.random.Generator) -> np.ndarray:
    h, w = image_hw
    for _ in range(100):
        a = affine_matrix(
            image_hw,
            rotation_deg=rng.uniform(-ranges.rotation_deg, ranges.rotation_deg),
            translation=(rng.uniform(-1, 1) * ranges.translation * w, rng.uniform(-1, 1) * ranges.translation * h),
            scale=rng.uniform(ranges.scale_min, ranges.scale_max),
            shear_deg=rng.uniform(-ranges.shear_deg, ranges.shear_deg),
        )
        if abs(np.linalg.det(a[:2, :2])) > 1e-3:
            return a
    raise ValueError("could not sample a non-degenerate affine transform")


def warp_image(image: np.ndarray, affine: np.ndarray) -> np.ndarray:
    """Bilinear ``out(p) = image(inv(A) p)`` for a [C,H,W] float array, zeros outside."""
    c, h, w = image.shape
    vv, uu = np.mgrid[0:h, 0:w]
    pts = np.column_stack([uu.ravel(), vv.ravel()]).astype(np.float64)
    src = geo.apply_h(geo.inv3(affine), pts)
    mat = geo.bilinear_matrix(src, (h, w), dtype=np.float64)
    out = (mat @ image.reshape(c, -1).astype(np.float64).T).T
    return out.reshape(c, h, w).astype(image.dtype)


def view_coherent_augment(
    image: np.ndarray,
    h_image: Union[np.ndarray, Sequence[np.ndarray]],
    labels: Dict[str, np.ndarray],
    ranges: AugmentRanges,
    rng: np.random.Generator,
    affine: np.ndarray = None,
):
    """Returns (image', homographies', labels').

    ``h_image`` is one image->grid homography or a list of them (one per
    plane); ``labels`` maps names to (M, 2) pixel arrays.
    """
    a = affine if affine is not None else random_affine(image.shape[1:], ranges, rng)
    if abs(np.linalg.det(a[:2, :2])) <= 1e-3:
        a = random_affine(image.shape[1:], ranges, rng)
    a_inv = geo.inv3(a)
    img = warp_image(image, a)
    if isinstance(h_image, np.ndarray) and h_image.ndim == 2:
        hs = h_image @ a_inv
    else:
        hs = [np.asarray(h) @ a_inv for h in h_image]
    moved = {}
    for key, pts in labels.items():
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        moved[key] = geo.apply_h(a, pts) if len(pts) else pts.copy()
    return img, hs, moved
