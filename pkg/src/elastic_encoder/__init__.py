"""Elastic masked-LM encoder with nested head/MLP slicing and its training toolkit."""

__version__ = "0.1.0"
