"""Feature extraction from pretrained models into .fbn bundles."""

__version__ = "0.1.0"
