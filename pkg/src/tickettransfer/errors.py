"""Exception hierarchy shared by every module in the package."""


class TicketError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(TicketError, ValueError):
    """An operation was called with arguments that violate its preconditions."""


class OracleError(TicketError):
    """The finite-difference oracle saw a non-finite loss."""


class ArchitectureError(TicketError, ValueError):
    """An architecture description is inconsistent."""


class NumericError(TicketError, FloatingPointError):
    """A forward or backward pass produced a non-finite value."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class DegenerateLayerError(TicketError):
    """Pruning would remove every weight of a layer."""


class MaskError(ContractError):
    """A mask set does not match the parameters it is applied to."""


class FormatError(TicketError):
    """A binary file could not be decoded."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class LabelRangeError(FormatError):
    pass


class CheckpointError(TicketError):
    """A requested checkpoint is missing or the trajectory is invalid."""


class DatasetError(TicketError, ValueError):
    pass


class ConfigError(TicketError, ValueError):
    pass


class DivergenceError(TicketError):
    """Training produced a non-finite loss."""
