"""Cross-attention word alignment."""

__version__ = "0.1.0"
