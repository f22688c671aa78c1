"""Exception hierarchy.

Each top-level category maps to one CLI exit code (see ``EXIT_CODES``).
"""


class FedMetaError(Exception):
    """Base class for all package errors."""


class ConfigError(FedMetaError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class DataError(FedMetaError):
    """Problems with input datasets."""


class FormatError(DataError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        suffix = f" (at byte offset {offset})" if offset is not None else ""
        super().__init__(message + suffix)


class ProtocolError(FedMetaError):
    """Federation protocol violations, including failed nodes."""


class WireError(ProtocolError):
    pass


class EncodingError(WireError):
    pass


class DecodeError(WireError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        suffix = f" (at byte offset {offset})" if offset is not None else ""
        super().__init__(message + suffix)


class TransportError(WireError):
    pass


class ChannelClosedError(TransportError):
    pass


class IntegrityError(TransportError):
    """Checksum mismatch on a received frame."""


class ShapeError(FedMetaError, ValueError):
    pass


class StateError(FedMetaError, RuntimeError):
    pass


class DomainError(FedMetaError, ValueError):
    pass


class PairingError(DomainError):
    pass


class PartitionError(FedMetaError, KeyError):
    """A requested block key is missing from a parameter set."""

    def __str__(self) -> str:
        return Exception.__str__(self)


class StructureError(FedMetaError):
    pass


EXIT_CODES = {
    ConfigError: 2,
    DataError: 3,
    ProtocolError: 4,
}


def exit_code_for(exc: BaseException) -> int:
    for cls, code in EXIT_CODES.items():
        if isinstance(exc, cls):
            return code
    return 5
