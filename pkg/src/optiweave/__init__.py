"""Project-level code efficiency optimization via automatic code editing."""

__version__ = "0.1.0"
