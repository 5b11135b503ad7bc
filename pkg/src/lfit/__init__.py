"""Knowledge-infused interpretable temporal-fusion forecaster."""

__version__ = "0.1.0"
