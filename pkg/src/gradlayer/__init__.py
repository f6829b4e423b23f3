"""Gradient layers: finetuning generative models by stacking critic-gradient steps."""

__version__ = "0.1.0"
