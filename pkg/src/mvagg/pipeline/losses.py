"""Training objectives and target encoding for occupancy maps."""
from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from ..tensor import Function, ShapeError, Tensor, add, scale


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class MSELoss(Function):
    def forward(self, pred, target):
        if pred.shape != target.shape:
            raise ShapeError("loss_mse", "shape", list(target.shape), list(pred.shape))
        diff = pred.astype(np.float64) - target
        return np.asarray((diff * diff).mean(), dtype=pred.dtype)

    def backward(self, g, pred, target):
        gs = g.reshape(())
        return (gs * 2.0 * (pred - target) / pred.size).astype(pred.dtype), None


def loss_mse(pred: Tensor, target) -> Tensor:
    return MSELoss.apply(pred, _const(target, pred.dtype))


class FocalLoss(Function):
    """Penalty-reduced pixelwise focal loss on logits, normalised by the peak count.

    ``target`` is the Gaussian-splatted map; cells equal to 1 are peaks.
    """

    alpha = 2.0
    beta = 4.0

    def forward(self, logits, target):
        if logits.shape != target.shape:
            raise ShapeError("loss_focal", "shape", list(target.shape), list(logits.shape))
        x = logits.astype(np.float64)
        y = target.astype(np.float64)
        pos = y >= 1.0
        self.npos = max(1, int(pos.sum()))
        p = _sigmoid(x)
        log_p = -_softplus(-x)
        log_1mp = -_softplus(x)
        a, b = self.alpha, self.beta
        w_neg = (1.0 - y) ** b
        pos_term = -((1.0 - p) ** a) * log_p
        neg_term = -w_neg * (p**a) * log_1mp
        total = np.where(pos, pos_term, neg_term).sum()
        self.cache = (pos, p, log_p, log_1mp, w_neg)
        return np.asarray(total / self.npos, dtype=logits.dtype)

    def backward(self, g, logits, target):
        pos, p, log_p, log_1mp, w_neg = self.cache
        a = self.alpha
        d_pos = (1.0 - p) ** a * (a * p * log_p - (1.0 - p))
        d_neg = w_neg * p**a * (p - a * (1.0 - p) * log_1mp)
        grad = np.where(pos, d_pos, d_neg) * (g.reshape(()) / self.npos)
        return grad.astype(logits.dtype), None


class MaskedL1(Function):
    """Sum of |pred - target| over masked cells (broadcast over channels) / max(1, #mask)."""

    def forward(self, pred, target, mask):
        if pred.shape != target.shape or pred.shape[1:] != mask.shape[-2:]:
            raise ShapeError("offset_l1", "shape", list(target.shape), list(pred.shape))
        m = mask.reshape((1,) + mask.shape[-2:]).astype(np.float64)
        self.norm = max(1.0, float(m.sum()))
        diff = pred.astype(np.float64) - target
        self.sign = np.sign(diff) * m
        return np.asarray((np.abs(diff) * m).sum() / self.norm, dtype=pred.dtype)

    def backward(self, g, pred, target, mask):
        return (self.sign * (g.reshape(()) / self.norm)).astype(pred.dtype), None, None


def _const(arr, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype))


def loss_focal(
    logits: Tensor,
    target,
    offsets_pred: Optional[Tensor] = None,
    offsets_target=None,
    alpha: float = 2.0,
    beta: float = 4.0,
    offset_weight: float = 1.0,
) -> Tensor:
    """Focal term plus L1 offset regression at peak cells."""
    tgt = np.asarray(target)
    focal = FocalLoss.apply(logits, _const(tgt, logits.dtype), alpha=alpha, beta=beta)
    if offsets_pred is None:
        return focal
    peaks = (tgt.reshape(tgt.shape[-2:]) >= 1.0).astype(logits.dtype)
    l1 = MaskedL1.apply(offsets_pred, _const(offsets_target, logits.dtype), _const(peaks, logits.dtype))
    return add(focal, scale(l1, offset_weight))


# --------------------------------------------------------------------------
# Targets


def gaussian_targets(
    points: np.ndarray, shape: Tuple[int, int], radius: int = 3
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Splat points (x, y) onto a grid of ``shape``.

    Returns (heatmap [1,rows,cols] with value 1 exactly at each rounded point,
    offsets [2,rows,cols] from the rounded cell to the true point, and the
    integer peak cells (M, 2) as (col, row)).
    """
    rows, cols = shape
    heat = np.zeros((rows, cols), dtype=np.float32)
    off = np.zeros((2, rows, cols), dtype=np.float32)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    ok = np.all(np.isfinite(pts), axis=1)
    pts = pts[ok]
    cells = np.rint(pts).astype(np.int64)
    inside = (cells[:, 0] >= 0) & (cells[:, 0] < cols) & (cells[:, 1] >= 0) & (cells[:, 1] < rows)
    pts, cells = pts[inside], cells[inside]
    sigma = (2 * radius + 1) / 6.0
    k = np.arange(-radius, radius + 1)
    kern = np.exp(-(k[None, :] ** 2 + k[:, None] ** 2) / (2 * sigma * sigma)).astype(np.float32)
    for (cx, cy), (px, py) in zip(cells, pts):
        y0, y1 = max(0, cy - radius), min(rows, cy + radius + 1)
        x0, x1 = max(0, cx - radius), min(cols, cx + radius + 1)
        patch = kern[y0 - cy + radius: y1 - cy + radius, x0 - cx + radius: x1 - cx + radius]
        np.maximum(heat[y0:y1, x0:x1], patch, out=heat[y0:y1, x0:x1])
        off[0, cy, cx] = px - cx
        off[1, cy, cx] = py - cy
    return heat[None], off, cells
