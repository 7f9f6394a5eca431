"""Data-parallel path tracing with proxy-guided ray forwarding between simulated ranks."""

__version__ = "0.1.0"
