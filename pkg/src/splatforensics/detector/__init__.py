from .network import DetectorConfig, PackedBatch, backward, forward, init_params, param_shapes, zero_params
from .serialization import grid_pool, grid_unpool, serialize_scene
from .layers import scene_mean_pool
from .training import Checkpoint, bce_loss, grad_check, predict, predict_logits, train

__all__ = [
    "Checkpoint",
    "DetectorConfig",
    "PackedBatch",
    "backward",
    "bce_loss",
    "forward",
    "grad_check",
    "grid_pool",
    "grid_unpool",
    "init_params",
    "param_shapes",
    "predict",
    "predict_logits",
    "scene_mean_pool",
    "serialize_scene",
    "train",
    "zero_params",
]
