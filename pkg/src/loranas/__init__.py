"""Weight-sharing search over per-module LoRA ranks."""

__version__ = "0.1.0"
