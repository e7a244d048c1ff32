"""Exception types shared across the package."""

from __future__ import annotations


class ContractViolationError(ValueError):
    """An operation was called with arguments outside its contract."""


class DomainError(ValueError):
    """A mathematically undefined evaluation, e.g. log of a non-positive value."""


class DataFormatError(ValueError):
    """A binary file failed to parse; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """Invalid experiment configuration; lists every offending key."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems))
        self.problems = list(problems)


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite."""
