"""Self-contained trainable 3D segmentation network (numpy only).

Layout is channel-last (batch, depth, height, width, channels). Forward
passes cache what the analytic backward pass needs; no autograd anywhere.
"""

from .model import (
    AdamState,
    GradCheckReport,
    LossValues,
    ParamStore,
    UNetConfig,
    adam_step,
    backward,
    forward,
    gradient_check,
    init_params,
    loss_and_grad,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint

__all__ = [
    "AdamState",
    "Checkpoint",
    "GradCheckReport",
    "LossValues",
    "ParamStore",
    "UNetConfig",
    "adam_step",
    "backward",
    "forward",
    "gradient_check",
    "init_params",
    "load_checkpoint",
    "loss_and_grad",
    "save_checkpoint",
]
