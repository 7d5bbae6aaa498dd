"""
Exception hierarchy shared by every module.
The CLI maps each family onto an exit code.
"""


class QkicaError(Exception):
    exit_code = 2


class InvalidConfigError(QkicaError, ValueError):
    exit_code = 1


class ResultsExistError(InvalidConfigError):
    pass


class NumericalError(QkicaError, ArithmeticError):
    exit_code = 2


class SingularCovarianceError(NumericalError):
    pass


class NonPositivePivotError(NumericalError):
    pass


class NotOrthogonalError(NumericalError):
    pass


class UnstableExtensionError(NumericalError):
    pass


class BudgetError(NumericalError):
    pass


class LayoutTooLargeError(NumericalError):
    pass


class AcceptanceError(QkicaError):
    exit_code = 3

    def __init__(self, message, files=()):
        super().__init__(message)
        self.files = list(files)
