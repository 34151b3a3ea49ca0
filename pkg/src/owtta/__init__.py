"""Open-world test-time adaptation on a toy vision transformer."""

__version__ = "0.1.0"
