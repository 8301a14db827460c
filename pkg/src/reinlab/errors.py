"""Exception types shared across the package."""


class ReinlabError(Exception):
    """Base class for all package errors."""


class ShapeError(ReinlabError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ReinlabError):
    """A computation produced or received non-finite values."""


class ContractError(ReinlabError):
    """An operation was called outside its documented contract."""


class ConfigError(ReinlabError):
    """A configuration object violates its invariants."""


class ParseError(ReinlabError):
    """A file could not be decoded; carries file name and byte offset."""

    def __init__(self, path, offset, message):
        super().__init__(f"{path} @ byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset
