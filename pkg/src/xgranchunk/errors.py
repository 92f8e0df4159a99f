"""Exception hierarchy shared across the package."""

from __future__ import annotations


class ChunkerError(Exception):
    """Base class for every error raised by this package."""


class DataError(ChunkerError):
    """Invalid input data (bad shapes, bad documents, malformed files)."""


class EmptyDocument(DataError):
    pass


class NoGranularities(DataError):
    pass


class EmptyPattern(DataError):
    pass


class IndexOutOfRange(DataError):
    def __init__(self, set_position: int, index: int, n: int):
        self.set_position = set_position
        self.index = index
        self.n = n
        super().__init__(
            f"pattern {set_position}: sentence index {index} outside [0, {n})"
        )


class ShapeMismatch(DataError):
    pass


class AllMaskedRow(DataError):
    def __init__(self, row_index: int):
        self.row_index = row_index
        super().__init__(f"mask row {row_index} has no unmasked entry")


class NonFiniteInput(DataError):
    pass


class NonFiniteGradient(DataError):
    pass


class ZeroVector(DataError):
    pass


class NotUnitNorm(DataError):
    pass


class EmptyIndex(DataError):
    pass


class EmptyBatch(DataError):
    pass


class ParseError(DataError):
    def __init__(self, path: str, line: int, reason: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {reason}")


class ConfigError(ChunkerError):
    """Unknown configuration key or a value of the wrong type."""


class RemoteError(ChunkerError):
    """Failure talking to a remote embedding service."""


class RemoteRejected(RemoteError):
    def __init__(self, status: int, body: str):
        self.status = status
        self.body = body
        super().__init__(f"embedding service rejected request ({status}): {body}")


class RemoteUnavailable(RemoteError):
    pass


class MalformedResponse(RemoteError):
    pass
