"""Exception types raised across the package."""


class RagcapError(Exception):
    """Base class for all package errors."""


class NonFiniteValue(RagcapError, ValueError):
    pass


class ZeroVector(RagcapError, ValueError):
    """Cosine similarity requested for a vector of zero norm."""

    def __init__(self, message: str = "zero-norm vector", row: int | None = None):
        super().__init__(message)
        self.row = row


class EmptyBlock(RagcapError, ValueError):
    pass


class DimensionMismatch(RagcapError, ValueError):
    pass


class ZeroKey(RagcapError, ValueError):
    pass


class InvalidRecord(RagcapError, ValueError):
    pass


class EmptyMemory(RagcapError, ValueError):
    pass


class FormatError(RagcapError, ValueError):
    """A binary file has a bad magic, version, or layout."""


class IoError(RagcapError, OSError):
    pass


class ShapeMismatch(RagcapError, ValueError):
    pass


class StaleCache(RagcapError, RuntimeError):
    """Backward pass requested against activations that no longer match the parameters."""


class EmptyCaption(RagcapError, ValueError):
    pass


class NonFiniteGradient(RagcapError, FloatingPointError):
    def __init__(self, group: str):
        super().__init__(f"non-finite gradient in parameter group {group!r}; step aborted")
        self.group = group


class ConfigError(RagcapError, ValueError):
    pass
