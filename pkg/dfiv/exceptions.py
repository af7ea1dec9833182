"""
Error types
Every failure carries a readable detail and the process exit code the CLI reports
"""


class DfivError(Exception):
    exit_code: int = 1

    def __init__(self, detail: str, exit_code: int | None = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code

    def __str__(self) -> str:
        return self.detail


class DimensionMismatchError(DfivError):
    pass


class SingularSystemError(DfivError):
    pass


class NonFiniteError(DfivError):
    pass


class DivergenceError(DfivError):
    def __init__(self, detail: str, iteration: int | None = None):
        super().__init__(detail)
        self.iteration = iteration


class MissingDataError(DfivError):
    pass


class TuningError(DfivError):
    pass


class InvalidSpecError(DfivError):
    exit_code = 2
