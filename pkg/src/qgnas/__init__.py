"""Joint search over graph network architectures and per-site quantisation."""

from .autodiff import Tape, Tensor
from .quant import QUANT_PAIRS, QuantPair, QuantScheme, bit_cost, parse_pair, parse_scheme

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "QUANT_PAIRS",
    "QuantPair",
    "QuantScheme",
    "bit_cost",
    "parse_pair",
    "parse_scheme",
    "__version__",
]
