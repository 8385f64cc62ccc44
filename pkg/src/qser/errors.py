"""Exception types raised across the package."""


class QserError(Exception):
    """Base class for all package-specific errors."""


# --- signal analysis ---

class UtteranceTooShort(QserError):
    pass


class NonFiniteInput(QserError):
    pass


class InconsistentBinCount(QserError):
    pass


class UnsupportedFormat(QserError):
    pass


class CorruptHeader(QserError):
    pass


# --- network layers ---

class ShapeMismatch(QserError):
    pass


class DegenerateBatch(QserError):
    pass


class MissingForwardCache(QserError):
    pass


class EmptySequence(QserError):
    pass


class ZeroProjection(QserError):
    pass


class TemperatureNonPositive(QserError):
    pass


class LabelOutOfRange(QserError):
    pass


# --- persistence / data ---

class FormatError(QserError):
    pass


class NonFiniteData(QserError):
    pass


class VersionMismatch(QserError):
    pass


class CorruptFile(QserError):
    pass


class ParseError(QserError):
    pass


class UnknownLabel(QserError):
    pass


class EmptyDataset(QserError):
    pass
