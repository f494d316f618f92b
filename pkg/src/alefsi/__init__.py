"""Monolithic ALE fluid-structure interaction solver library."""

__version__ = "0.1.0"
