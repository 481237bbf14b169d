"""Network pieces: feature extractor, per-view heads, aggregation, BEV generator."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import geometry as geo
from ..attention import HamConfig, ham_forward, init_ham_params
from ..tensor import Tensor, concat, conv2d, relu, sigmoid

Params = Dict[str, Tensor]

GATES = ("both", "channel", "spatial", "none")
LOSSES = ("focal", "mse")
PERVIEW = ("none", "foot", "head+foot")
DOWNSAMPLE = 4


class PipelineConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    C: int = 32
    D: int = 4
    K: Optional[int] = None
    dz: float = 0.1
    gates: str = "both"
    score_multiply: bool = False
    loss: str = "focal"
    perview_loss: str = "foot"
    perview_weight: float = 1.0
    offset_weight: float = 1.0
    focal_alpha: float = 2.0
    focal_beta: float = 4.0
    gaussian_radius: int = 3
    perview_radius: int = 2
    extractor_channels: Tuple[int, int] = (16, 32)
    bev_hidden: int = 16
    augment: bool = True
    aug_prob: float = 0.5
    aug_rotation_deg: float = 15.0
    aug_translation: float = 0.1
    aug_scale_min: float = 0.9
    aug_scale_max: float = 1.1
    aug_shear_deg: float = 5.0

    def __post_init__(self):
        self.extractor_channels = tuple(self.extractor_channels)
        if self.gates not in GATES:
            raise PipelineConfigError(f"gates must be one of {GATES}")
        if self.loss not in LOSSES:
            raise PipelineConfigError(f"loss must be one of {LOSSES}")
        if self.perview_loss not in PERVIEW:
            raise PipelineConfigError(f"perview_loss must be one of {PERVIEW}")
        if self.D < 1:
            raise PipelineConfigError("D must be >= 1")
        if self.K is not None and not 1 <= self.K <= self.C:
            raise PipelineConfigError(f"K must lie in [1, C={self.C}]")
        if self.D == 1 and self.K is not None and self.K != self.C:
            raise PipelineConfigError("with a single homography K must equal C")

    @property
    def ham(self) -> Optional[HamConfig]:
        if self.gates == "none":
            return None
        return HamConfig(
            C=self.C,
            D=self.D,
            K=self.K,
            channel_gate=self.gates in ("both", "channel"),
            spatial_gate=self.gates in ("both", "spatial"),
            score_multiply=self.score_multiply,
        )

    @property
    def path_channels(self) -> int:
        ham = self.ham
        return self.C if ham is None else ham.out_channels

    def bev_in_channels(self, n_views: int) -> int:
        return n_views * self.D * self.path_channels + 2

    def to_json(self) -> dict:
        out = asdict(self)
        out["extractor_channels"] = list(self.extractor_channels)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise PipelineConfigError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**obj)


def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def init_params(config: PipelineConfig, n_views: int, rng: np.random.Generator) -> Params:
    p: Params = {}

    def conv(name, cout, cin, k, bias=0.0, gain=1.0):
        p[f"{name}.weight"] = Tensor(_he(rng, (cout, cin, k, k), cin * k * k) * gain, name=f"{name}.weight")
        p[f"{name}.bias"] = Tensor(np.full(cout, bias, np.float32), name=f"{name}.bias")

    c1, c2 = config.extractor_channels
    conv("extractor.conv1", c1, 3, 3)
    conv("extractor.conv2", c2, c1, 3)
    conv("extractor.conv3", config.C, c2, 3)
    prior = -2.19 if config.loss == "focal" else 0.0
    conv("heads.foot", 1, config.C, 1, bias=prior, gain=0.1)
    conv("heads.head", 1, config.C, 1, bias=prior, gain=0.1)
    ham = config.ham
    if ham is not None:
        p.update(init_ham_params(ham, rng))
    hid = config.bev_hidden
    conv("bev.conv0", hid, config.bev_in_channels(n_views), 1)
    conv("bev.conv1", hid, hid, 3)
    conv("bev.conv2", hid, hid, 3)
    conv("bev.conv3", hid, hid, 3)
    # focal prior: initial foreground probability ~0.1
    conv("bev.heat", 1, hid, 1, bias=prior, gain=0.1)
    if config.loss == "focal":
        conv("bev.offset", 2, hid, 1, gain=0.1)
    return p


def extract_features(image: Tensor, params: Params) -> Tensor:
    """[3,H,W] -> [C,H/4,W/4]"""
    _, h, w = image.shape
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise PipelineConfigError(f"image size {h}x{w} not divisible by {DOWNSAMPLE}")
    x = relu(conv2d(image, params["extractor.conv1.weight"], params["extractor.conv1.bias"], stride=2, padding=1))
    x = relu(conv2d(x, params["extractor.conv2.weight"], params["extractor.conv2.bias"], stride=2, padding=1))
    return relu(conv2d(x, params["extractor.conv3.weight"], params["extractor.conv3.bias"], stride=1, padding=1))


def per_view_heads(feature: Tensor, params: Params, loss: str = "focal") -> Tuple[Tensor, Tensor]:
    """Foot and head maps [1,h,w]: logits in focal mode, probabilities in MSE mode."""
    foot = conv2d(feature, params["heads.foot.weight"], params["heads.foot.bias"])
    head = conv2d(feature, params["heads.head.weight"], params["heads.head.bias"])
    if loss == "mse":
        return sigmoid(foot), sigmoid(head)
    return foot, head


def coordinate_maps(rows: int, cols: int, dtype=np.float32) -> np.ndarray:
    """[2,rows,cols]: normalised x then y, each in [-1, 1]."""
    xs = np.linspace(-1.0, 1.0, cols) if cols > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, rows) if rows > 1 else np.zeros(1)
    out = np.empty((2, rows, cols), dtype=dtype)
    out[0] = xs[None, :]
    out[1] = ys[:, None]
    return out


def aggregate(gated: Sequence[Sequence[Tensor]], grid: geo.GroundGrid) -> Tensor:
    """Concatenate warped maps (view-major, then homography) plus coordinate maps."""
    flat = [t for view in gated for t in view]
    for t in flat:
        if t.shape[1:] != grid.shape:
            raise PipelineConfigError(f"warped map {list(t.shape)} does not match grid {grid.shape}")
    dtype = flat[0].dtype if flat else np.float32
    coords = Tensor(coordinate_maps(grid.rows, grid.cols, dtype))
    return concat(flat + [coords], axis=0)


def bev_generate(aggregated: Tensor, params: Params) -> Tuple[Tensor, Optional[Tensor]]:
    """Occupancy logits [1,rows,cols] and, when present, offsets [2,rows,cols]."""
    w = params["bev.conv0.weight"]
    if aggregated.shape[0] != w.shape[1]:
        raise PipelineConfigError(f"BEV generator expects {w.shape[1]} channels, got {aggregated.shape[0]}")
    x = relu(conv2d(aggregated, w, params["bev.conv0.bias"]))
    x = relu(conv2d(x, params["bev.conv1.weight"], params["bev.conv1.bias"], padding=1, dilation=1))
    x = relu(conv2d(x, params["bev.conv2.weight"], params["bev.conv2.bias"], padding=2, dilation=2))
    x = relu(conv2d(x, params["bev.conv3.weight"], params["bev.conv3.bias"], padding=4, dilation=4))
    heat = conv2d(x, params["bev.heat.weight"], params["bev.heat.bias"])
    off = None
    if "bev.offset.weight" in params:
        off = conv2d(x, params["bev.offset.weight"], params["bev.offset.bias"])
    return heat, off


@dataclass
class ForwardOutput:
    heatmap: Tensor
    offsets: Optional[Tensor]
    foot: List[Tensor]
    head: List[Tensor]
    features: List[Tensor] = field(default_factory=list)
    traces: list = field(default_factory=list)


def forward(
    images: Sequence[Tensor],
    h_feat: Sequence[Sequence[np.ndarray]],
    grid: geo.GroundGrid,
    params: Params,
    config: PipelineConfig,
    keep_trace: bool = False,
) -> ForwardOutput:
    """extract -> heads -> gates -> warp per (view, homography) -> aggregate -> BEV.

    ``h_feat[i][k]`` maps feature-map pixels of view i to grid coordinates on
    the plane at height k*dz.
    """
    feats = [extract_features(img, params) for img in images]
    heads = [per_view_heads(f, params, config.loss) for f in feats]
    ham = config.ham
    traces: list = []
    if ham is None:
        paths = [[f] * config.D for f in feats]
    else:
        paths = ham_forward(feats, params, ham, trace=traces if keep_trace else None)
    warped = [[geo.warp_to_grid(p, h_feat[i][k], grid) for k, p in enumerate(view)] for i, view in enumerate(paths)]
    heat, off = bev_generate(aggregate(warped, grid), params)
    return ForwardOutput(heat, off, [h[0] for h in heads], [h[1] for h in heads], feats, traces)
