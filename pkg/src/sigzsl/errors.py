class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class FormatError(ValueError):
    """Raised for corrupt, truncated or version-mismatched binary files."""


class DataMismatchError(ValueError):
    """A checkpoint and a corpus (or two inputs) disagree about the class set."""
