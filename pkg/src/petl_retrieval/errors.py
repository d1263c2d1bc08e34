"""Exception categories shared across the package.

Each category maps to a distinct CLI exit code.
"""


class PetlError(Exception):
    exit_code = 1
    category = "error"


class ConfigError(PetlError, ValueError):
    """Invalid configuration or incompatible hyperparameters."""

    exit_code = 2
    category = "config"


class InputError(PetlError, ValueError):
    """Malformed data handed to an operation."""

    exit_code = 3
    category = "input"


class NumericalError(PetlError, ArithmeticError):
    """Non-finite loss, zero-norm embedding and similar."""

    exit_code = 4
    category = "numerical"
