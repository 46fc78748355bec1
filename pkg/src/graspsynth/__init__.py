"""Synthetic grasp data, scoring and proposal selection for parallel-jaw grippers."""

__version__ = "0.1.0"
