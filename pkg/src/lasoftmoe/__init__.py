"""Soft mixture-of-experts contrastive encoders for unified face attack detection."""

__version__ = "0.1.0"
