from . import autodiff as ad
from ._kernels import backend
from .autodiff import ShapeError, Tensor, backward, default_dtype, parameter
from .gradcheck import finite_difference_check
from .optim import Adam, AdamState, NonFiniteGradientError, adam_step
from .rng import SeededRng, gamma_sample

__all__ = [
    "Adam",
    "AdamState",
    "NonFiniteGradientError",
    "SeededRng",
    "ShapeError",
    "Tensor",
    "ad",
    "adam_step",
    "backend",
    "backward",
    "default_dtype",
    "finite_difference_check",
    "gamma_sample",
    "parameter",
]
