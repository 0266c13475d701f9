"""
Exception hierarchy shared by engines, CLI and API
"""
from typing import Any, Dict, List, Optional


class LatentEEError(Exception):
    """Base error. exit_code is the CLI status for this failure family."""

    exit_code = 1
    kind = "error"

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": type(self).__name__,
            "kind": self.kind,
            "message": self.message,
            "exit_code": self.exit_code,
            "details": _jsonable(self.details),
        }


class UsageError(LatentEEError):
    """Bad command-line flags"""

    exit_code = 2
    kind = "usage"


class SpecError(LatentEEError):
    """Model specification violates one or more identifiability rules"""

    exit_code = 3
    kind = "parse"

    def __init__(self, violations: List[str]):
        super().__init__("; ".join(violations), violations=violations)
        self.violations = violations


class ParseError(LatentEEError):
    exit_code = 3
    kind = "parse"

    def __init__(self, reason: str, path: Optional[str] = None,
                 line: Optional[int] = None, column: Optional[str] = None):
        where = f"{path or '<input>'}:{line if line is not None else '?'}"
        if column is not None:
            where += f" [{column}]"
        super().__init__(f"{where}: {reason}", path=path, line=line, column=column, reason=reason)
        self.line = line
        self.column = column
        self.reason = reason


class JoinError(ParseError):
    pass


class MissingCovariate(ParseError):
    pass


class BadDesign(LatentEEError):
    exit_code = 3
    kind = "parse"


class BadParam(LatentEEError):
    exit_code = 4
    kind = "convergence"


class NotConverged(LatentEEError):
    """Iteration cap reached; best holds the best iterate seen"""

    exit_code = 4
    kind = "convergence"

    def __init__(self, message: str, best: Any = None, trace: Optional[list] = None, **details: Any):
        super().__init__(message, **details)
        self.best = best
        self.trace = trace or []


class NumericJacobianFailure(LatentEEError):
    exit_code = 4
    kind = "convergence"


class Singular(LatentEEError):
    exit_code = 5
    kind = "identifiability"


class Unidentified(LatentEEError):
    exit_code = 5
    kind = "identifiability"


class RankDeficient(LatentEEError):
    exit_code = 5
    kind = "identifiability"


class InternalError(LatentEEError):
    """An unexpected exception surfaced at the CLI or API boundary"""

    exit_code = 1
    kind = "internal"

    @classmethod
    def wrap(cls, exc: BaseException) -> "InternalError":
        return cls(f"{type(exc).__name__}: {exc}", exception=type(exc).__name__)


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if hasattr(value, "tolist"):
        return value.tolist()
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return str(value)
