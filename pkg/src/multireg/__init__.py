"""Multiview point-cloud registration with learned motion synchronization."""

__version__ = "0.1.0"
