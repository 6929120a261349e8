# app/errors.py
# 서비스 전역에서 쓰는 예외 계층. CLI / 라우터가 여기서 exit code, HTTP status로 매핑한다.


class N2UQError(Exception):
    """Base class for every error raised by the toolkit."""


class ContractError(N2UQError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes do not agree."""


class DegenerateInputError(ContractError):
    """Input has no usable magnitude (all-zero filter, zero norm, ...)."""


class FormatError(N2UQError):
    """A file (IDX, CSV, checkpoint, packed model) could not be parsed."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (offset={offset})"
        super().__init__(message)


class DivergenceError(N2UQError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, last_good: str | None = None):
        self.last_good = last_good
        super().__init__(message)


class SelfcheckFailed(N2UQError):
    def __init__(self, report):
        self.report = report
        super().__init__("selfcheck failed")
