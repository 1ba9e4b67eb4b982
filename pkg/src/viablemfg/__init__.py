"""Mean field games on domains with invariant dynamics."""

__version__ = "0.1.0"
