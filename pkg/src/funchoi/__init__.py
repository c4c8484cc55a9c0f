"""Functional-generalization HOI detection head: clustering, augmentation, MLP, inference, evaluation."""

__version__ = "0.1.0"
