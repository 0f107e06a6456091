"""Desk-scale sequence-to-sequence laboratory.

Builds: a numpy tensor core with reverse-mode autodiff (compiled hot
kernels with a pure-python fallback), standard Transformer blocks with
absolute or relative positions, adaptive re-encoding decoders that
recompute source encodings per decoded token, the relation-composition
toy experiment, a synthetic nested-PP generalization task, and
intra-/inter-class variance entanglement metrics, all wired into a
seeded experiment harness and CLI.
"""

from . import kernels
from .tensor import Tensor, grad_check
from .optim import Adam

__version__ = "0.1.0"
__all__ = ["Tensor", "grad_check", "Adam", "kernels", "__version__"]
