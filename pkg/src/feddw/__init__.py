"""Deterministic federated-learning simulator with SL/CR consistency regularization.

Subpackages are imported explicitly (``from feddw import engine``); this
module stays import-light so entry points can pin BLAS thread counts
before numpy loads.
"""

__version__ = "0.1.0"
