"""Heterogeneous graph self-supervised learning via metapath jump numbers (CPU-only)."""

__version__ = "0.1.0"
CHECKPOINT_MAGIC = b"SESIM1"
