"""Holistic filter pruning on a small numpy training engine."""

__version__ = "0.1.0"
