"""Curvature-aware heterogeneous federated pruning simulator."""

__version__ = "0.1.0"
