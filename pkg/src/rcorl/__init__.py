"""Offline RL under constrained observations with a rich-state teacher."""

__version__ = "0.1.0"
