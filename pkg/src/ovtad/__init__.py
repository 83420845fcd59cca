"""One-stage open-vocabulary temporal action detection."""
__version__ = "0.1.0"
