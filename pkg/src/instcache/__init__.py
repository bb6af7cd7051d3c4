"""Predictive instruction-response caching: tree-search pre-population, analytics and a cache-first proxy."""

__version__ = "0.1.0"
