"""Dataset toolchain and evaluator for leaf-disease detection."""

__version__ = "0.1.0"
