"""Interactive interior-design recommendation with a coarse-to-fine policy."""

__version__ = "0.1.0"
