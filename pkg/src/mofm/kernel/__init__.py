"""Numerical kernel: tensors, differentiable ops, optimizers and gradient checks."""
import numpy as np

from . import functional
from .gradcheck import check_gradients, relative_error
from .nn import Module
from .optim import AdamW, LRSchedule, adamw_step, one_cycle, warmup_cosine
from .tensor import (Tensor, backward, concat, default_dtype, get_default_dtype, no_grad,
                     set_default_dtype, where)


def make_rng(seed) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


__all__ = [
    "AdamW", "LRSchedule", "Module", "Tensor", "adamw_step", "backward", "check_gradients", "concat",
    "default_dtype", "functional", "get_default_dtype", "make_rng", "no_grad", "one_cycle",
    "relative_error", "set_default_dtype", "warmup_cosine", "where",
]
