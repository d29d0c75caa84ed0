"""Audiovisual, contextual emotion recognition at desk scale."""

__version__ = "0.1.0"
