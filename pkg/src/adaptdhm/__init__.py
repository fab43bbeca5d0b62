"""Multi-distribution CTR modeling with dynamic-routing clustering."""

__version__ = "0.1.0"
