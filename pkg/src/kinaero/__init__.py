"""Variational RNN with online error regression driving a simulated compliant arm pair."""

__version__ = "0.1.0"
