"""Paraphrase-consistency probing and training harness for masked LMs."""

from .errors import ConslabError, InputError

__version__ = "0.1.0"

__all__ = ["ConslabError", "InputError", "__version__"]
