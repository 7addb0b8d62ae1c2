"""Exception hierarchy shared by every xmic module."""


class XmicError(Exception):
    """Base class for all library errors."""


class ZeroNormError(XmicError, ValueError):
    pass


class EmptySequenceError(XmicError, ValueError):
    pass


class BadShapeError(XmicError, ValueError):
    pass


class DimMismatchError(BadShapeError):
    pass


class NotNormalizedError(XmicError, ValueError):
    pass


class BadLabelError(XmicError, ValueError):
    pass


class NotScalarError(XmicError, ValueError):
    pass


class FormatError(XmicError, ValueError):
    """Raised for a malformed store or checkpoint file."""


class TaskMismatchError(XmicError, ValueError):
    pass


class BadSpecError(XmicError, ValueError):
    pass


class EmptyClassNameError(XmicError, ValueError):
    pass


class MissingLabelError(XmicError, KeyError):
    pass


class VocabularyMismatchError(XmicError, ValueError):
    pass


class IncompatibleCompositionError(XmicError, ValueError):
    pass


class UnknownKindError(XmicError, ValueError):
    pass


class NegativeInputError(XmicError, ValueError):
    pass


class EmptyInputError(XmicError, ValueError):
    pass
