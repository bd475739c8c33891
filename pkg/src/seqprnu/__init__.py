"""Sequential PRNU camera identification."""

__version__ = "0.1.0"
