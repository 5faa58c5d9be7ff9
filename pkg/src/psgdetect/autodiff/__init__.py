"""Small reverse-mode autodiff engine backing the detection network."""

from .checkpoint import load_tensors, save_tensors
from .gradcheck import GradcheckReport, gradcheck
from .nn import BatchNorm1d, BiGRU, Conv1d, Module, Parameter
from .ops import (
    batchnorm1d,
    bgru,
    conv1d,
    cross_entropy,
    cross_entropy_probs,
    log_softmax,
    maxpool1d,
    relu,
    smooth_l1,
    softmax,
)
from .tensor import Tensor, as_tensor, check_finite, concat, no_grad

__all__ = [
    "BatchNorm1d", "BiGRU", "Conv1d", "GradcheckReport", "Module", "Parameter", "Tensor",
    "as_tensor", "batchnorm1d", "bgru", "check_finite", "concat", "conv1d", "cross_entropy",
    "cross_entropy_probs", "gradcheck", "load_tensors", "log_softmax", "maxpool1d", "no_grad",
    "relu", "save_tensors", "smooth_l1", "softmax",
]
