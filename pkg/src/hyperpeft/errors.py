"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config errors exit 2, data errors
exit 3, a diverged training run exits 4.
"""


class ConfigError(ValueError):
    """A configuration value violates its constraints."""


class DataError(ValueError):
    """Input data (tokens, labels, corpus files) violates a contract."""


class InvalidTokenError(DataError):
    """A surface token is empty or contains whitespace."""


class InvalidLabelError(DataError):
    """A tag is not a syntactically valid sBIO label."""


class InvalidAnnotationError(DataError):
    """Spans overlap, fall out of bounds, or carry a reserved label."""


class SentinelCapacityError(DataError):
    """A sequence needs more sentinel tokens than the vocabulary reserves."""


class CorpusFormatError(DataError):
    """A corpus file does not parse.

    Carries the offending path and line number when known.
    """

    def __init__(self, message: str, path=None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = f"{path}:" + (f"{line}: " if line is not None else " ")
        super().__init__(f"{loc}{message}")
        self.path = path
        self.line = line


class ContractViolationError(ValueError):
    """An operation was called with tensors or arguments that break its contract."""


class InstrumentationError(RuntimeError):
    """A host model cannot be instrumented as planned."""

    def __init__(self, message: str, missing_sites=()):
        if missing_sites:
            message = f"{message}: {', '.join(missing_sites)}"
        super().__init__(message)
        self.missing_sites = tuple(missing_sites)


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss; carries a diagnostic payload."""

    def __init__(self, message: str, step: int | None = None,
                 task: str | None = None, batch_hash: str | None = None):
        super().__init__(message)
        self.step = step
        self.task = task
        self.batch_hash = batch_hash
