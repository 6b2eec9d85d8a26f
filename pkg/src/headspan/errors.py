"""Exception types shared across the package."""


class InvalidParameterError(ValueError):
    """An argument violates a documented precondition (non-finite input,
    out-of-range index, mismatched coefficient length, ...)."""


class ContractViolationError(RuntimeError):
    """Two pieces of state that must agree do not (tape/surfel mismatch,
    delta shapes that do not match the surfel set, ...)."""


class NoSurfaceError(RuntimeError):
    """Depth fusion produced an empty surface."""
