"""Exploration-schedule and replay-diversity laboratory on a 4-room gridworld."""

__version__ = "0.1.0"
