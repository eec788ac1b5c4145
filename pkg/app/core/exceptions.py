class TriadLabError(Exception):
    """Base exception for all exceptions in triadlab"""

    # process exit code used when the exception
    # reaches the command line handler
    exit_code = 1

    def __init__(self, detail: str | None = None):
        self.detail = detail or self.__class__.__doc__
        super().__init__(self.detail)


class RecordParseError(TriadLabError):
    """Session record text is malformed"""

    def __init__(self, detail: str, line_no: int):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {detail}")


class DatasetError(TriadLabError):
    """Dataset failed validation"""


class ReferentialError(DatasetError):
    """Personnel row cites an unknown session"""


class DuplicateSessionError(DatasetError):
    """Session id appears more than once"""


class EmptyPersonnelError(DatasetError):
    """Session has no personnel"""


class InvalidThresholdError(TriadLabError):
    """Forbidden triad threshold must be at least 2"""


class SessionMismatchError(TriadLabError):
    """Observed and rewired censuses cover different sessions"""


class InsufficientDataError(TriadLabError):
    """Not enough observations for the requested computation"""


class RankDeficiencyError(TriadLabError):
    """Design matrix does not have full column rank"""

    def __init__(self, columns: list[str]):
        self.columns = columns
        super().__init__(f"rank deficient design, offending columns: {', '.join(columns)}")


class SeparationError(TriadLabError):
    """Outcome is perfectly separated by the regressors"""


class ConvergenceError(TriadLabError):
    """Optimizer did not converge"""

    def __init__(self, detail: str, gradient_norm: float):
        self.gradient_norm = gradient_norm
        super().__init__(f"{detail} (gradient norm {gradient_norm:.3g})")


class NoEstimableGroupsError(TriadLabError):
    """Every group was dropped, no slopes are estimable"""


class UnknownRegressorError(TriadLabError):
    """Regressor is not part of the fitted model"""


class InfeasibleParametersError(TriadLabError):
    """Generator parameters cannot be satisfied"""


class ConfigError(TriadLabError):
    """Configuration is invalid"""

    exit_code = 2


class StageError(TriadLabError):
    """Pipeline stage failed"""

    exit_code = 3

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
