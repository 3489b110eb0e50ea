"""Oscillator chain with range-rescaled interactions and velocity-exchange
noise, its mean-field particle limit, optimal-transport diagnostics, and
diffusive energy-transport experiments."""

from . import chain, config, hydro, meanfield, model, streams, transport
from .cli import main

__version__ = "0.1.0"

__all__ = [
    "chain",
    "config",
    "hydro",
    "meanfield",
    "model",
    "streams",
    "transport",
    "main",
    "__version__",
]
