"""Salient object detection with multi-scale feature extraction, guided
feature fusion and residual refinement, on a small numpy autodiff core."""

from .loss import LossConfig, cross_entropy, designed_loss
from .model import CagnetConfig, Model, base_config, build, closed_form_params, count_params
from .tensor import ShapeError, Tape, Tensor

__all__ = [
    "CagnetConfig", "LossConfig", "Model", "ShapeError", "Tape", "Tensor", "base_config",
    "build", "closed_form_params", "count_params", "cross_entropy", "designed_loss",
]
__version__ = "0.1.0"
