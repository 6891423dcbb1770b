"""Exception types shared across the package."""


class SeqHashError(Exception):
    """Base class for every error raised by seqhash."""


class ShapeError(SeqHashError, ValueError):
    """Operand shapes do not agree."""

    def __init__(self, what, *shapes):
        self.shapes = shapes
        detail = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{what}: {detail}" if shapes else what)


class ConfigError(SeqHashError, ValueError):
    """An option or a combination of options is invalid."""


class FormatError(SeqHashError):
    """A file on disk does not match the expected container layout."""


class MagicMismatch(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class CorruptFile(FormatError):
    pass


class NumericError(SeqHashError, ArithmeticError):
    """A non-finite value showed up where a finite one is required."""
