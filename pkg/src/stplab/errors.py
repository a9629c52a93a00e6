"""Exception taxonomy shared across the package.

The CLI maps these to machine-readable exit codes: configuration and
contract problems exit 2, numeric failures exit 3, I/O and container
format problems exit 4.
"""


class StplabError(Exception):
    pass


class ConfigError(StplabError):
    """Invalid configuration value or unsupported option."""


class DimensionError(ConfigError):
    """Operand shapes do not conform."""


class ContractError(StplabError):
    """An API precondition was violated by the caller."""


class IncompatibilityError(ConfigError):
    """Checkpoint and requested configuration disagree."""


class GenerationError(StplabError):
    """Scene generation could not satisfy its constraints."""


class FormatError(StplabError):
    """Corrupt or unreadable container file."""


class NumericError(StplabError):
    """Non-finite values or a failed numeric check."""
