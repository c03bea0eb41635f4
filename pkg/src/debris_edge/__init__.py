"""Edge object-detection toolkit for floating plastic-debris imagery."""

__version__ = "0.1.0"
