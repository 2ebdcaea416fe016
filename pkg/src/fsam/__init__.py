"""Forgery screening with adversary-gated low-rank experts.

Library + CLI for a desk-scale forgery detection/localization model:
a frozen vision-transformer encoder adapted by always-on forgery experts
and detector-gated adversary experts, trained in three stages, attacked
with momentum-iterative gradient methods, and evaluated with permute-F1
and accuracy report grids.
"""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad  # noqa: F401
