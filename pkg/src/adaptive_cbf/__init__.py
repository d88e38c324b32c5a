"""Adaptive control-barrier-function safety layers trained with constrained PPO."""

__version__ = "0.1.0"
