"""Multiple optimal stopping for symmetric interacting particle systems."""

__version__ = "0.1.0"
