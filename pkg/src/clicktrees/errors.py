"""Exception hierarchy shared by every stage of the pipeline."""


class ClickTreesError(Exception):
    """Base class for data errors raised by the toolkit."""


class ArgumentError(ClickTreesError, ValueError):
    """An argument violates a documented precondition."""


class InvalidUrlError(ClickTreesError, ValueError):
    pass


class ParseError(ClickTreesError, ValueError):
    """A Click Log v1 line could not be decoded."""

    def __init__(self, reason: str, line_no: int | None = None, line: str | None = None):
        self.reason = reason
        self.line_no = line_no
        self.line = line
        where = f"line {line_no}: " if line_no is not None else ""
        super().__init__(f"{where}{reason}")

    def __reduce__(self):
        # keep the structured fields when raised inside a worker process
        return type(self), (self.reason, self.line_no, self.line)


class OrderError(ClickTreesError):
    """A user's records arrived out of timestamp order in a streaming pass."""


class InsufficientDataError(ClickTreesError):
    pass


class DegenerateSampleError(ClickTreesError):
    """The sample carries no spread, so the estimator is undefined."""
