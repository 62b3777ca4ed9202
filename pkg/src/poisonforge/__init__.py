"""Data-poisoning laboratory for next-item recommenders."""

__version__ = "0.1.0"
