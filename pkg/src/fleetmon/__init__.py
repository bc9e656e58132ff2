"""Desk-scale multi-task interactive robot fleet learning."""

__version__ = "0.1.0"
