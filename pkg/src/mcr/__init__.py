"""Manipulation-centric visual representations for robot learning."""

__version__ = "0.1.0"
