"""Sample preparation, loss assembly, SGD updates and evaluation loops."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import geometry as geo
from ..metrics import Evaluator, EvalReport, MetricConfig, decode
from ..simulator import FrameSample
from ..tensor import Tensor, add, backward, no_recording, recording, scale
from .augment import AugmentRanges, view_coherent_augment
from .losses import gaussian_targets, loss_focal, loss_mse
from .model import DOWNSAMPLE, ForwardOutput, Params, PipelineConfig, forward, init_params

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    clip_norm: float = 5.0
    seed: int = 0


@dataclass
class Rig:
    """Fixed geometry for one camera set on one grid."""

    calibrations: List[geo.CameraCalibration]
    grid: geo.GroundGrid
    h_image: List[List[np.ndarray]]  # [view][plane] image -> grid
    image_hw: Tuple[int, int]

    @classmethod
    def build(cls, calibrations, grid: geo.GroundGrid, D: int, dz: float) -> "Rig":
        stack = geo.build_stack(calibrations, grid, D, dz)
        return cls(list(calibrations), grid, stack.matrices, calibrations[0].image_size)

    @property
    def feature_hw(self) -> Tuple[int, int]:
        return self.image_hw[0] // DOWNSAMPLE, self.image_hw[1] // DOWNSAMPLE

    @property
    def n_views(self) -> int:
        return len(self.calibrations)


@dataclass
class Inputs:
    images: List[Tensor]
    h_feat: List[List[np.ndarray]]
    bev_target: np.ndarray
    offset_target: np.ndarray
    foot_targets: List[np.ndarray] = field(default_factory=list)
    head_targets: List[np.ndarray] = field(default_factory=list)
    positions: np.ndarray = None


def prepare(
    sample: FrameSample,
    rig: Rig,
    config: PipelineConfig,
    rng: Optional[np.random.Generator] = None,
    augment: bool = False,
    dtype=np.float32,
) -> Inputs:
    ranges = AugmentRanges(
        config.aug_rotation_deg, config.aug_translation, config.aug_scale_min, config.aug_scale_max, config.aug_shear_deg
    )
    fhw = rig.feature_hw
    images, h_feat, feet, heads = [], [], [], []
    for i, raw in enumerate(sample.images):
        img = raw.astype(np.float64) / 255.0
        hs = rig.h_image[i]
        foot = sample.foot_px[i]
        head = sample.head_px[i]
        if augment and rng is not None and rng.random() < config.aug_prob:
            img, hs, moved = view_coherent_augment(img, hs, {"foot": foot, "head": head}, ranges, rng)
            foot, head = moved["foot"], moved["head"]
        images.append(Tensor(img, dtype=dtype))
        h_feat.append([geo.feature_homography(h, rig.image_hw, fhw) for h in hs])
        sy, sx = rig.image_hw[0] / fhw[0], rig.image_hw[1] / fhw[1]
        to_feat = np.array([1.0 / sx, 1.0 / sy])
        feet.append(gaussian_targets(foot * to_feat, fhw, config.perview_radius)[0])
        heads.append(gaussian_targets(head * to_feat, fhw, config.perview_radius)[0])
    heat, off, _ = gaussian_targets(sample.positions, rig.grid.shape, config.gaussian_radius)
    return Inputs(images, h_feat, heat, off, feet, heads, sample.positions)


def total_loss(out: ForwardOutput, inputs: Inputs, config: PipelineConfig) -> Tensor:
    if config.loss == "focal":
        loss = loss_focal(
            out.heatmap, inputs.bev_target, out.offsets, inputs.offset_target,
            config.focal_alpha, config.focal_beta, config.offset_weight,
        )

        def view_loss(pred, tgt):
            return loss_focal(pred, tgt, alpha=config.focal_alpha, beta=config.focal_beta)
    else:
        from ..tensor import sigmoid

        loss = loss_mse(sigmoid(out.heatmap), inputs.bev_target)
        view_loss = loss_mse

    terms = []
    if config.perview_loss in ("foot", "head+foot"):
        terms += [view_loss(p, t) for p, t in zip(out.foot, inputs.foot_targets)]
    if config.perview_loss == "head+foot":
        terms += [view_loss(p, t) for p, t in zip(out.head, inputs.head_targets)]
    if terms:
        acc = terms[0]
        for t in terms[1:]:
            acc = add(acc, t)
        loss = add(loss, scale(acc, config.perview_weight / len(out.foot)))
    return loss


def loss_and_grads(params: Params, inputs: Inputs, rig: Rig, config: PipelineConfig):
    with recording() as rec:
        out = forward(inputs.images, inputs.h_feat, rig.grid, params, config)
        loss = total_loss(out, inputs, config)
    grads = backward(rec, np.ones((), dtype=loss.dtype), output=loss, wrt=params)
    return loss, grads


def sgd_update(
    params: Params,
    grads: Dict[str, Tensor],
    state: Dict[str, np.ndarray],
    lr: float,
    momentum: float,
    clip_norm: Optional[float],
) -> Params:
    """SGD with momentum, optional global-norm clipping; returns new params."""
    factor = 1.0
    if clip_norm:
        norm = float(np.sqrt(sum(float((g.data.astype(np.float64) ** 2).sum()) for g in grads.values())))
        if norm > clip_norm:
            factor = clip_norm / norm
    new: Params = {}
    for name, p in params.items():
        g = grads[name].data * np.float32(factor)
        v = state.get(name)
        v = g.astype(p.dtype) if v is None else momentum * v + g
        state[name] = v
        new[name] = Tensor(p.data - lr * v, name=name, dtype=p.dtype)
    return new


def train_step(
    inputs: Inputs,
    params: Params,
    state: Dict[str, np.ndarray],
    rig: Rig,
    config: PipelineConfig,
    train: TrainConfig,
) -> Tuple[Params, float]:
    loss, grads = loss_and_grads(params, inputs, rig, config)
    value = float(loss.data)
    if not np.isfinite(value):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g.data))]
        raise TrainingError(f"non-finite loss {value}; non-finite grads in {bad[:5]}")
    return sgd_update(params, grads, state, train.lr, train.momentum, train.clip_norm), value


def predict(sample: FrameSample, params: Params, rig: Rig, config: PipelineConfig, keep_trace: bool = False) -> ForwardOutput:
    inputs = prepare(sample, rig, config)
    with no_recording():
        return forward(inputs.images, inputs.h_feat, rig.grid, params, config, keep_trace=keep_trace)


def evaluate(
    frames: Sequence[FrameSample],
    params: Params,
    rig: Rig,
    config: PipelineConfig,
    metric: MetricConfig,
    evaluator: Optional[Evaluator] = None,
) -> EvalReport:
    m = metric.resolved(rig.grid.cell_size)
    ev = evaluator if evaluator is not None else Evaluator(m.t)
    for s in frames:
        out = predict(s, params, rig, config)
        dets = decode(out.heatmap.data, None if out.offsets is None else out.offsets.data, m.threshold, m.nms_radius)
        ev.add(s.frame_index, dets, s.positions)
    return ev.report()


def new_params(config: PipelineConfig, n_views: int, seed: int) -> Params:
    return init_params(config, n_views, np.random.default_rng([seed, 1]))


def fit(
    train_frames: Sequence[FrameSample],
    test_frames: Sequence[FrameSample],
    rig: Rig,
    config: PipelineConfig,
    train: TrainConfig,
    metric: MetricConfig,
    params: Optional[Params] = None,
    on_epoch: Optional[Callable[[int, dict, Params], None]] = None,
) -> Tuple[Params, List[dict]]:
    """Train for ``train.epochs`` epochs of single-sample steps.

    After each epoch the test frames are evaluated; ``on_epoch`` receives the
    epoch number, its log record and the current parameters.
    """
    if params is None:
        params = new_params(config, rig.n_views, train.seed)
    state: Dict[str, np.ndarray] = {}
    history = []
    for epoch in range(1, train.epochs + 1):
        rng = np.random.default_rng([train.seed, 2, epoch])
        order = rng.permutation(len(train_frames))
        losses = []
        for j in order:
            inputs = prepare(train_frames[j], rig, config, rng, augment=config.augment)
            params, value = train_step(inputs, params, state, rig, config, train)
            losses.append(value)
        rep = evaluate(test_frames, params, rig, config, metric)
        rec = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "moda": rep.moda,
            "modp": rep.modp,
            "precision": rep.precision,
            "recall": rep.recall,
        }
        log.info("epoch %d loss %.4f moda %.3f", epoch, rec["train_loss"], rec["moda"])
        history.append(rec)
        if on_epoch is not None:
            on_epoch(epoch, rec, params)
    return params, history
