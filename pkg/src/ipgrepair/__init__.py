"""Inference-provenance graphs for characterizing and repairing dense networks."""

__version__ = "0.1.0"
