"""Trace-driven virtual-clock simulator for cross-device federated learning."""

__version__ = "0.1.0"
