"""Unified model-based / learned localization with map-aided self-labelling."""

__version__ = "0.1.0"
