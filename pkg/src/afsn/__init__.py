"""Anchor-free Siamese tracking on a from-scratch numpy tensor core."""

__version__ = "0.1.0"
