"""Sedenion algebra, sedenion convolution and a sedenion U-Net, in numpy."""

from sedunet.algebra import (
    HyperNumber,
    SignedIndexTable,
    cayley_dickson_table,
    conjugate,
    find_zero_divisor,
    hyper_mul,
    paper_table_16,
)

__version__ = "0.1.0"

__all__ = [
    "HyperNumber",
    "SignedIndexTable",
    "cayley_dickson_table",
    "conjugate",
    "find_zero_divisor",
    "hyper_mul",
    "paper_table_16",
]
