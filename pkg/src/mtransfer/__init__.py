"""Hierarchical feed-forward style transfer with a small numpy autodiff core."""

__version__ = "0.1.0"
