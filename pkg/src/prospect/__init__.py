"""Learned prospection: multiple-hypothesis goal prediction and search over predicted futures."""

__version__ = "0.1.0"
