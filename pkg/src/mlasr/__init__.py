"""Multilingual sequence-to-sequence speech recognition at desk scale."""

__version__ = "0.1.0"
