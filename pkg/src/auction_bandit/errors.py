"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class LogParseError(ValueError):
    def __init__(self, row: int, message: str):
        self.row = row
        super().__init__(f"row {row}: {message}")


class ReferentialIntegrityError(ValueError):
    pass


class ContractViolation(RuntimeError):
    """A mechanism precondition failed. ``auction_index`` is set by the engine."""

    def __init__(self, message: str, module: str = "mechanisms", auction_index: int | None = None):
        self.module = module
        self.auction_index = auction_index
        where = f" at auction {auction_index}" if auction_index is not None else ""
        super().__init__(f"[{module}]{where} {message}")


class UndefinedPaymentError(ContractViolation):
    pass


class ValidityRegionError(ValueError):
    """A policy explores more than the logged data supports and no override was given."""


class InsufficientDetailError(ValueError):
    """Per-auction detail was requested from aggregate-only trajectories."""


class UnusableLogError(ValueError):
    pass
