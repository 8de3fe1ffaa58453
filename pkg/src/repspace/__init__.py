"""Transfer-based representation embedding toolkit."""

__version__ = "0.1.0"
