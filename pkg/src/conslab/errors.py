"""Exception hierarchy shared across the package.

``InputError`` marks problems with user-supplied files or configuration;
the CLI maps it to exit code 2. Everything else derived from
``ConslabError`` maps to exit code 1.
"""


class ConslabError(Exception):
    """Base class for all errors raised by this package."""


class InputError(ConslabError):
    """Bad user input: malformed files, unknown ids, invalid configuration."""
