"""Heterogeneous-rank federated LoRA simulator with dimension-wise aggregation and layer editing."""

__version__ = "0.1.0"
