"""Multi-stream transformer toolkit for isolated sign-word recognition."""

__version__ = "0.1.0"
