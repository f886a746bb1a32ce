"""Per-block hidden-state exporter for the dialogue screening toolkit."""

__version__ = "0.1.0"
