"""Desk-scale training and evaluation framework for three facial affect
tasks: valence/arousal estimation with polarity gating, expression
classification with a voting ensemble, and temporal action-unit detection."""

__version__ = "0.1.0"

from .core import Task  # noqa: F401
