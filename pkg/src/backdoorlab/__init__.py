"""Desk-scale backdoor attack, trigger recovery and unlearning toolkit."""

__version__ = "0.1.0"

from . import datapipe, eraser, netlab, numcore, poisoner, recovery

__all__ = ["datapipe", "eraser", "netlab", "numcore", "poisoner", "recovery"]
