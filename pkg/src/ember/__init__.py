"""Checkpoint-free intermittent DNN inference: Q15 kernels, pattern-based
weight concentration, a two-mode trainer and an energy-harvesting simulator."""

__version__ = "0.1.0"
