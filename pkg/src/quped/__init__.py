"""Quantized personalized federated learning with knowledge distillation."""
from .kernels import BACKEND

__version__ = "0.1.0"
