"""Utility functions and helpers"""

