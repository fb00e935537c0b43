class QamwError(Exception):
    """Base class for all codec errors."""


class DimensionError(QamwError, ValueError):
    pass


class DomainError(QamwError, ValueError):
    pass


class EncodingError(QamwError, ValueError):
    pass


class CalibrationError(QamwError, ValueError):
    pass


class FormatError(QamwError, ValueError):
    """Malformed or truncated file / byte stream."""


class IntegrityError(QamwError, ValueError):
    """Digest or self-consistency check failed.

    ``row`` is set when the failure can be pinned to a single matrix row.
    """

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row
