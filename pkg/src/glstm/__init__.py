"""Guided-LSTM image caption generation at desk scale."""

__version__ = "0.1.0"
