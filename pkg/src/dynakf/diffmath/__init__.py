"""Minimal reverse-mode autodiff and reparameterised sampling."""

from . import ops
from .gradcheck import GradCheckReport, NonDeterministicError, finite_difference, grad_check, relative_error
from .random import (
    DIRICHLET_GUARD,
    FrozenNoise,
    NoiseRecorder,
    RngStream,
    sample_dirichlet,
    sample_gamma,
    sample_gaussian,
)
from .tensor import Gradients, NonFiniteError, ShapeError, Tape, TapeError, Tensor, as_tensor, no_tape

__all__ = [
    "ops",
    "Tensor",
    "Tape",
    "Gradients",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "as_tensor",
    "no_tape",
    "RngStream",
    "NoiseRecorder",
    "FrozenNoise",
    "sample_gaussian",
    "sample_gamma",
    "sample_dirichlet",
    "DIRICHLET_GUARD",
    "grad_check",
    "finite_difference",
    "relative_error",
    "GradCheckReport",
    "NonDeterministicError",
]
