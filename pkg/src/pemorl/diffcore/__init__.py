"""Small float64 reverse-mode autodiff used by the environment model and the learner."""

from .checkpoint import load_params, save_params
from .gradcheck import GradCheckReport, grad_check
from .layers import dense, encoder_block, multi_head_attention, pool_mean_max
from .optim import ParamSet, adam_step
from .tensor import Tensor, no_grad

__all__ = [
    "GradCheckReport",
    "ParamSet",
    "Tensor",
    "adam_step",
    "dense",
    "encoder_block",
    "grad_check",
    "load_params",
    "multi_head_attention",
    "no_grad",
    "pool_mean_max",
    "save_params",
]
