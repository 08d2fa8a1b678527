"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI uses for that category.
"""


class FedError(Exception):
    exit_code = 1


class InputError(FedError, ValueError):
    exit_code = 3


class ConfigError(FedError, ValueError):
    exit_code = 2


class IngestionError(FedError, ValueError):
    exit_code = 4


class NumericError(FedError, ArithmeticError):
    exit_code = 5


class DegenerateWeightsError(FedError, ArithmeticError):
    exit_code = 6


class ProtocolError(FedError, ValueError):
    exit_code = 7


class TransportError(FedError, ConnectionError):
    exit_code = 8
