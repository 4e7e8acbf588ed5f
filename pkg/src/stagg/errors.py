"""Exception hierarchy shared by every stagg module."""


class StaggError(Exception):
    """Base class for all errors raised by stagg."""


class InvalidLength(StaggError, ValueError):
    pass


class EmptyInput(StaggError, ValueError):
    pass


class InvalidReduction(StaggError, ValueError):
    pass


class InvalidInterval(StaggError, ValueError):
    pass


class VideoTooShort(StaggError, ValueError):
    pass


class InvalidSpec(StaggError, ValueError):
    pass


class DegenerateLabels(StaggError, ValueError):
    pass


class IncompleteEvaluation(StaggError, ValueError):
    pass


class NumericalError(StaggError, ArithmeticError):
    pass


class FormatError(StaggError):
    """Raised when an on-disk artifact cannot be decoded."""


class FeatureFormatError(FormatError):
    pass


class ModelFormatError(FormatError):
    pass


class ManifestError(FormatError):
    pass
