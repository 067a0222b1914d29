"""
Exception hierarchy shared by every stage.

Each error carries a ``detail`` message and the process exit code the CLI
returns for it (0 success, 2 validation, 3 stage, 4 I/O).
"""

from typing import Any, Dict, List, Optional


class VocabBridgeError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 3

    def __init__(self, detail: str, problems: Optional[List[str]] = None):
        super().__init__(detail)
        self.detail = detail
        self.problems = list(problems or [])

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {
            "error": type(self).__name__,
            "detail": self.detail,
            "exit_code": self.exit_code,
        }
        if self.problems:
            payload["problems"] = self.problems
        return payload


class ConfigValidationError(VocabBridgeError):
    exit_code = 2

    def __init__(self, problems: List[str]):
        super().__init__(f"{len(problems)} configuration problem(s)", problems)

    def __str__(self) -> str:
        return "; ".join(self.problems) if self.problems else self.detail


class StageError(VocabBridgeError):
    exit_code = 3


class InvalidArgumentError(StageError, ValueError):
    pass


class DictionaryTooSmallError(StageError):
    pass


class DimensionMismatchError(StageError):
    pass


class NonConvergenceError(StageError):
    pass


class ZeroMassError(StageError):
    """A projected distribution carried no probability mass."""


class ClientError(StageError):
    """A model backend failed to produce a distribution."""


class ProvenanceMismatchError(StageError):
    pass


class ArtifactIOError(VocabBridgeError):
    exit_code = 4


class EmbeddingFormatError(ArtifactIOError):
    pass


class CorruptArtifactError(ArtifactIOError):
    pass
