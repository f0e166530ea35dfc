"""Degree-aware mixed-precision GNN feature quantization and accelerator modeling."""

__version__ = "0.1.0"
