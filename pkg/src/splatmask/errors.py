"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An input violates a documented precondition (bad shape, non-finite value, ...)."""


class InternalError(RuntimeError):
    """An invariant the implementation guarantees was broken; indicates a bug."""


class DegenerateSceneError(RuntimeError):
    """An operation would leave the scene unusable (e.g. pruning every Gaussian)."""


class OracleError(RuntimeError):
    """A verification oracle could not produce a trustworthy value."""
