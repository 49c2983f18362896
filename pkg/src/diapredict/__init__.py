"""Interaction-aware driving behavior prediction over dynamic insertion areas."""

__version__ = "0.1.0"
