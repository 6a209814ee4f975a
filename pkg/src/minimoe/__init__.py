"""Mixture-of-minimal-experts students distilled from dense encoders."""

__version__ = "0.1.0"
