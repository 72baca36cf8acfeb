"""Distributed full-batch GCN training with cover-based communication plans
and low-bit quantized boundary exchange."""

__version__ = "0.1.0"
