from .augment import AugmentRanges, affine_matrix, random_affine, view_coherent_augment, warp_image
from .losses import gaussian_targets, loss_focal, loss_mse
from .model import (
    ForwardOutput,
    PipelineConfig,
    PipelineConfigError,
    aggregate,
    bev_generate,
    coordinate_maps,
    extract_features,
    forward,
    init_params,
    per_view_heads,
)
from .training import (
    Inputs,
    Rig,
    TrainConfig,
    TrainingError,
    evaluate,
    fit,
    loss_and_grads,
    new_params,
    predict,
    prepare,
    sgd_update,
    total_loss,
    train_step,
)
