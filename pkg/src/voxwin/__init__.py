"""Sparse-voxel windowed self-attention backbone with a streaming engine."""

__version__ = "0.1.0"

DEFAULT_SEED = 1729
