"""Exception types shared across the package."""


class DynsplatError(Exception):
    """Base class for all package errors."""


class DegenerateRotation(DynsplatError):
    """6D rotation input collapses under Gram-Schmidt."""


class FrameOutOfRange(DynsplatError, IndexError):
    pass


class TooFewPoints(DynsplatError):
    pass


class DegenerateConfiguration(DynsplatError):
    """Point set too degenerate for rigid alignment."""


class EmptyWindow(DynsplatError):
    pass


class NoValidPairs(DynsplatError):
    pass


class EmptyMask(DynsplatError):
    pass


class NoVisiblePoints(DynsplatError):
    pass


class ShapeMismatch(DynsplatError, ValueError):
    pass


class StaleDecision(DynsplatError):
    """Split decision no longer matches the scene topology."""


class SpecInfeasible(DynsplatError):
    """Synthetic scene spec violates its own constraints."""


class ContainerFormatError(DynsplatError, ValueError):
    """Malformed scene/prior container file."""
