"""Homography attention: a channel gate choosing K channels per homography,
followed by one spatial gate per homography path."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import (
    Tensor,
    add,
    concat,
    conv2d,
    index_select,
    linear,
    mul,
    pool_channel,
    pool_spatial,
    relu,
    reshape,
    sigmoid,
    softmax,
)

Params = Dict[str, Tensor]


class HamConfigError(ValueError):
    pass


@dataclass
class HamConfig:
    C: int = 32
    D: int = 4
    K: Optional[int] = None
    mlp_hidden: Optional[int] = None
    spatial_kernel: Tuple[int, int] = (7, 7)
    channel_gate: bool = True
    spatial_gate: bool = True
    # weight gathered channels by their scores when D > 1 so the scores get gradients
    score_multiply: bool = False

    def __post_init__(self):
        if self.D < 1:
            raise HamConfigError("D must be >= 1")
        if self.K is None:
            self.K = self.C if self.D == 1 else max(1, self.C // self.D)
        if self.mlp_hidden is None:
            self.mlp_hidden = max(1, self.C // 8)
        self.spatial_kernel = tuple(self.spatial_kernel)
        self.validate()

    def validate(self) -> None:
        if self.D < 1:
            raise HamConfigError("D must be >= 1")
        if not 1 <= self.K <= self.C:
            raise HamConfigError(f"K must lie in [1, C={self.C}], got {self.K}")
        if self.D == 1 and self.K != self.C:
            raise HamConfigError("with a single homography K must equal C")
        if any(k % 2 == 0 for k in self.spatial_kernel):
            raise HamConfigError("spatial kernels must be odd")

    @property
    def out_channels(self) -> int:
        """Channels per homography path leaving the module."""
        return self.K if self.channel_gate else self.C


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def init_ham_params(config: HamConfig, rng: np.random.Generator, prefix: str = "ham") -> Params:
    c, d, hdim = config.C, config.D, config.mlp_hidden
    p: Params = {}

    def put(name, arr):
        p[f"{prefix}.{name}"] = Tensor(arr, name=f"{prefix}.{name}")

    if config.channel_gate:
        put("mlp1.weight", _he(rng, (hdim, c), c))
        put("mlp1.bias", np.zeros(hdim, np.float32))
        put("mlp2.weight", _he(rng, (c * d, hdim), hdim))
        put("mlp2.bias", np.zeros(c * d, np.float32))
    if config.spatial_gate:
        kh, kw = config.spatial_kernel
        for i in range(d):
            put(f"spatial.{i}.conv1.weight", _he(rng, (2, 2, kh, kw), 2 * kh * kw))
            put(f"spatial.{i}.conv1.bias", np.zeros(2, np.float32))
            put(f"spatial.{i}.conv2.weight", _he(rng, (1, 2, kh, kw), 2 * kh * kw))
            put(f"spatial.{i}.conv2.bias", np.zeros(1, np.float32))
    return p


def _mlp(v: Tensor, params: Params, prefix: str) -> Tensor:
    hidden = relu(linear(v, params[f"{prefix}.mlp1.weight"], params[f"{prefix}.mlp1.bias"]))
    return linear(hidden, params[f"{prefix}.mlp2.weight"], params[f"{prefix}.mlp2.bias"])


def channel_scores(features: Tensor, params: Params, config: HamConfig, prefix: str = "ham") -> Tensor:
    """Per-homography channel scores, a [D, C] tensor whose rows each sum to 1."""
    if features.data.ndim != 3 or features.shape[0] != config.C:
        raise HamConfigError(f"expected [{config.C},h,w] features, got {list(features.shape)}")
    mx = _mlp(pool_spatial(features, "max"), params, prefix)
    av = _mlp(pool_spatial(features, "avg"), params, prefix)
    logits = reshape(add(mx, av), (config.D, config.C))
    return softmax(logits, axis=1)


def top_k_indices(scores: np.ndarray, k: int) -> List[np.ndarray]:
    """Indices of the k largest entries of each row, descending; ties go to the lower index."""
    scores = np.atleast_2d(np.asarray(scores))
    if not 1 <= k <= scores.shape[1]:
        raise HamConfigError(f"K must lie in [1, {scores.shape[1]}], got {k}")
    return [np.argsort(-row, kind="stable")[:k] for row in scores]


def top_k_select(features: Tensor, scores, k: int) -> Tuple[List[Tensor], List[np.ndarray]]:
    score_arr = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    idx = top_k_indices(score_arr, k)
    return [index_select(features, i) for i in idx], idx


def channel_gate(
    features: Tensor, params: Params, config: HamConfig, prefix: str = "ham"
) -> Tuple[List[Tensor], Tensor, List[np.ndarray]]:
    """Returns (D gated maps, scores, selected indices per homography)."""
    scores = channel_scores(features, params, config, prefix)
    if config.D == 1:
        gated = mul(features, reshape(scores, (config.C,)))
        return [gated], scores, [np.arange(config.C)]
    outs, idx = top_k_select(features, scores, config.K)
    if config.score_multiply:
        weighted = []
        for d, (o, i) in enumerate(zip(outs, idx)):
            row = reshape(index_select(scores, [d]), (config.C,))
            weighted.append(mul(o, index_select(row, i)))
        outs = weighted
    return outs, scores, idx


def spatial_gate(
    features: Tensor, params: Params, d: int, config: HamConfig, prefix: str = "ham"
) -> Tuple[Tensor, Tensor]:
    """Returns (gated features, [1,h,w] attention map) for homography path d."""
    if not 0 <= d < config.D:
        raise HamConfigError(f"gate index {d} out of range for D={config.D}")
    kh, kw = config.spatial_kernel
    pooled = concat([pool_channel(features, "max"), pool_channel(features, "avg")], axis=0)
    base = f"{prefix}.spatial.{d}"
    hidden = relu(conv2d(pooled, params[f"{base}.conv1.weight"], params[f"{base}.conv1.bias"], padding=kh // 2))
    att = sigmoid(conv2d(hidden, params[f"{base}.conv2.weight"], params[f"{base}.conv2.bias"], padding=kh // 2))
    return mul(features, att), att


@dataclass
class HamTrace:
    scores: Optional[np.ndarray]
    indices: List[np.ndarray]
    channel_outputs: List[np.ndarray]
    spatial_maps: List[Optional[np.ndarray]]


def ham_view(features: Tensor, params: Params, config: HamConfig, prefix: str = "ham"):
    """Gate one view: D tensors of [out_channels, h, w] plus a trace."""
    if config.channel_gate:
        paths, scores, idx = channel_gate(features, params, config, prefix)
        score_arr = scores.data
    else:
        paths, score_arr, idx = [features] * config.D, None, [np.arange(config.C)] * config.D
    chan_out = [p.data for p in paths]
    maps: List[Optional[np.ndarray]] = [None] * config.D
    if config.spatial_gate:
        gated = []
        for d, p in enumerate(paths):
            out, att = spatial_gate(p, params, d, config, prefix)
            gated.append(out)
            maps[d] = att.data
        paths = gated
    return paths, HamTrace(score_arr, idx, chan_out, maps)


def ham_forward(
    views: Sequence[Tensor], params: Params, config: HamConfig, prefix: str = "ham", trace: Optional[list] = None
) -> List[List[Tensor]]:
    """Apply the module independently to each view; weights are shared across views."""
    if views:
        ref = views[0].shape
        for v in views:
            if v.shape != ref:
                raise HamConfigError(f"all views must share [C,h,w]; got {list(v.shape)} vs {list(ref)}")
    out = []
    for v in views:
        paths, tr = ham_view(v, params, config, prefix)
        out.append(paths)
        if trace is not None:
            trace.append(tr)
    return out
