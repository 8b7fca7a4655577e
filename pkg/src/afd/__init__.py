"""Attention-based feature distillation for detectors, on a numpy autodiff core."""

from .attention import AttnMasks, MaskConfig, ProposalSet, compute_masks
from .config import RunConfig
from .errors import AfdError
from .losses import LossWeights, total_loss
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "AttnMasks",
    "MaskConfig",
    "ProposalSet",
    "compute_masks",
    "RunConfig",
    "AfdError",
    "LossWeights",
    "total_loss",
    "Tensor",
    "backward",
    "no_grad",
]
