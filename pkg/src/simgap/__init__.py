"""Certified simulation-gap bounds from sampled transitions, and controllers that respect them."""
from . import certificate, covering, dataset, dynamics, lipestimate, lipnet, symctrl, trainer
from .dynamics import Box, DiscreteSystem, DomainError, SystemPair, make_pair

__all__ = ["Box", "DiscreteSystem", "DomainError", "SystemPair", "make_pair", "certificate",
           "covering", "dataset", "dynamics", "lipestimate", "lipnet", "symctrl", "trainer"]
__version__ = "0.1.0"
