"""Exception types shared across the package."""


class KaesError(Exception):
    """Base class for all errors raised by this package."""


class TsvParseError(KaesError):
    """A data file could not be parsed; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ScoreValidationError(KaesError):
    """A score or prompt fell outside its declared range."""


class BinaryFormatError(KaesError):
    """A binary file (embeddings, kernel cache, codebook, model) is malformed.

    ``offset`` is the byte position at which the problem was detected, when
    known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"at byte {offset}: {message}"
        super().__init__(message)
        self.offset = offset


class KernelMismatchError(KaesError):
    """Two kernel-side objects (profiles, histograms, matrices) are not
    comparable: different n-gram ranges, codebooks, shapes, or id lists."""
