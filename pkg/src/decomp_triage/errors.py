"""Shared exception types for the triage pipeline."""


class TriageError(Exception):
    """Base class for every error raised by this package."""


class NotDecompiled(TriageError):
    """A sample was used where successfully decompiled C text is required."""

    def __init__(self, sha256: str, status: str | None = None):
        self.sha256 = sha256
        self.status = status
        detail = f" (status={status})" if status else ""
        super().__init__(f"sample {sha256} has no usable decompilation{detail}")


class ConfigError(TriageError):
    """Configuration file is missing, unparseable, or fails validation."""
