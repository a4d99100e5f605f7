"""Minimal numpy tensor substrate with tape-based reverse-mode gradients."""

from . import ops
from .nn import Buffer, Conv2d, Module
from .optim import adam_step
from .rng import Rng
from .tensor import (NonFiniteError, Parameter, Tape, TapeError, Tensor, backward,
                     set_finite_checks)

__all__ = [
    "ops", "Buffer", "Conv2d", "Module", "adam_step", "Rng", "NonFiniteError", "Parameter",
    "Tape", "TapeError", "Tensor", "backward", "set_finite_checks",
]
