"""Exception hierarchy shared by every nvrc module."""


class NvrcError(Exception):
    """Base class for all codec errors."""


class ConfigurationError(NvrcError, ValueError):
    """Invalid configuration, shapes or hyper-parameters."""


class UsageError(NvrcError, ValueError):
    """An API was called outside of its contract."""


class NumericDomainError(NvrcError, ValueError):
    """A value left the domain an operation is defined on."""


class DecodeError(NvrcError):
    """A bitstream or coded segment could not be decoded.

    ``section`` names the part of the stream that failed and ``position`` is a
    byte offset (or symbol index) when one is known.
    """

    def __init__(self, message, section=None, position=None):
        self.section = section
        self.position = position
        where = []
        if section is not None:
            where.append(f"section={section}")
        if position is not None:
            where.append(f"position={position}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class ChecksumError(DecodeError):
    pass


class VersionError(DecodeError):
    pass


class TruncatedError(DecodeError):
    pass
