"""Federated bias detection and signal scoring for adverse-event corpora."""

__version__ = "0.1.0"
