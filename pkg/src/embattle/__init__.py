"""Desk-scale laboratory for word-embedding backdoor attacks on text classifiers."""

__version__ = "0.1.0"
