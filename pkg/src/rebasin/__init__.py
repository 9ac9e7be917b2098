"""Weight-space surgery for small CPU-trained networks: permutation alignment,
interpolation, re-normalization, barrier measurement, and pruning repair."""

__version__ = "0.1.0"
