"""Exception hierarchy shared by all ternkit modules."""


class TernkitError(Exception):
    pass


class DomainError(TernkitError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class IntegrityError(TernkitError):
    """A packed tensor violates its encoding invariants."""


class ModelFormatError(TernkitError):
    """Base class for model file load failures."""


class BadMagicError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


class TrainingError(TernkitError):
    pass
