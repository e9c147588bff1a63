"""Retrieval-based MPC pick-and-place planner scored in a frozen
vision-language embedding space, plus the benchmark it is evaluated on."""

__version__ = "0.1.0"
