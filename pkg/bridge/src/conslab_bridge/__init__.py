"""JSON-lines scorer bridge for pretrained masked LMs."""

from .server import MaskedLMBridge, main

__all__ = ["MaskedLMBridge", "main"]
