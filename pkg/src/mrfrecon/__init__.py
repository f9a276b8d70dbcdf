"""MR Fingerprinting reconstruction with a low-rank/subspace model and an
untrained generative network prior."""

__version__ = "0.1.0"
