"""Simulation and verification laboratory for evolving genealogies.

Genealogies are finite (marked) ultrametric measure spaces.  The package
provides forward individual-based simulators (Moran, branching), dual
coalescents, a statistical harness for duality identities, Girsanov path
reweighting and Poisson concatenation tools.
"""
from .core import *  # noqa: F401,F403
from .errors import GenealogyError  # noqa: F401

__version__ = "0.1.0"
