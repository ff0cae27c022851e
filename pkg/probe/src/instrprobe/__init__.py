"""In-interpreter instruction-count probe."""

__version__ = "0.1.0"
