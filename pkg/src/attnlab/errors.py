"""Exception types raised across attnlab."""


class AttnLabError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(AttnLabError, ValueError):
    pass


class NonFiniteError(AttnLabError, ValueError):
    pass


class DegenerateRowError(AttnLabError, ValueError):
    """A query row has no admissible key (fully masked) or a non-positive normalizer."""

    def __init__(self, message: str, rows=()):
        super().__init__(message)
        self.rows = tuple(rows)


class MaskAlignmentError(AttnLabError, ValueError):
    pass


class SpecError(AttnLabError, ValueError):
    pass


class ConvergenceError(AttnLabError, RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class UnknownSymbolError(AttnLabError, ValueError):
    def __init__(self, symbol: str, position: int):
        super().__init__(f"no vocabulary entry covers {symbol!r} at position {position}")
        self.symbol = symbol
        self.position = position


class LookupError_(AttnLabError, IndexError):
    """Token index outside the embedding table."""


class FormatError(AttnLabError, ValueError):
    """Malformed weight, vocabulary or preset file."""
