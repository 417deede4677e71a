"""Entropy-guided tool-integrated reasoning sampler and preference curator."""

__version__ = "0.1.0"
