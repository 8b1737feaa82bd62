"""Package-wide exception types."""


class DataFormatError(ValueError):
    """A file or on-disk structure could not be parsed as its declared format."""


class NumericalError(RuntimeError):
    """A numerical procedure produced non-finite values or diverged."""
