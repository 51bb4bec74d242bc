"""Numerical building blocks: float64 linear algebra, random streams,
reverse-mode autodiff, optimizers and the BTSR tensor file format."""

from . import autodiff, btsr
from .autodiff import Var, backward, gradients, param
from .linalg import cho_solve, cholesky, sym_eigh, sym_sqrt
from .optim import EMA, AdamW
from .rng import Rng, as_rng

__all__ = [
    "AdamW", "EMA", "Rng", "Var", "as_rng", "autodiff", "backward", "btsr",
    "cho_solve", "cholesky", "gradients", "param", "sym_eigh", "sym_sqrt",
]
