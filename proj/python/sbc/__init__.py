"""Structured Bayesian compression: sparsity priors, pruning and quantized export."""

from ._sbc import *  # noqa: F401,F403
from ._sbc import __doc__  # noqa: F401
