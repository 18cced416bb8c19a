"""Dynamic-temperature knowledge distillation for RF-fingerprint device identification."""

__version__ = "0.1.0"
