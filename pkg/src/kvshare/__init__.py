"""Simulator and schedulers for serving many LLMs on shared GPU memory."""

__version__ = "0.1.0"
