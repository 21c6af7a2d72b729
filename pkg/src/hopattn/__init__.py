"""Attention with a cross-layer hidden state, Hopfield dynamics and rank-collapse diagnostics."""

from hopattn._backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
