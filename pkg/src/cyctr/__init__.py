"""Cycle-consistent transformer for few-shot segmentation on a numpy autodiff core."""

__version__ = "0.1.0"
