"""Dual-stream motion/scenario decoupling for future-movement classification of a single agent in video."""

__version__ = "0.1.0"
