"""Exception hierarchy shared across the package.

``InputError`` and its subclasses signal bad user input (CLI exit code 1);
``ContractError`` signals a violated internal precondition (exit code 2).
"""


class MMTError(Exception):
    pass


class InputError(MMTError, ValueError):
    pass


class ConfigError(InputError):
    pass


class VocabularyError(InputError):
    pass


class StructuralError(InputError):
    """Two artifacts (checkpoints, manifests) that should match do not."""


class DimensionError(MMTError, ValueError):
    pass


class ContractError(MMTError, RuntimeError):
    pass


class NonFiniteError(MMTError, ArithmeticError):
    pass


class TrainingDiverged(MMTError, RuntimeError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
