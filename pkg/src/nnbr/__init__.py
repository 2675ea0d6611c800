"""Next novel basket recommendation with a bi-directional basket transformer."""

__version__ = "0.1.0"
