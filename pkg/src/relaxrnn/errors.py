"""Exception types shared across the package.

Each carries an ``exit_code`` so the command line can map failures to
process exit statuses without inspecting messages.
"""


class RelaxError(Exception):
    code = "E_INTERNAL"
    exit_code = 1


class ContractError(RelaxError, ValueError):
    """Invalid argument, shape mismatch or violated precondition."""

    code = "E_CONTRACT"
    exit_code = 2


class DataFormatError(RelaxError, ValueError):
    """Malformed or inconsistent dataset / model file."""

    code = "E_DATA"
    exit_code = 3


class NumericError(RelaxError, ArithmeticError):
    """Non-finite loss or intermediate value."""

    code = "E_NUMERIC"
    exit_code = 4
