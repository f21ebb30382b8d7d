class InvalidArgument(ValueError):
    """Caller passed shapes or values outside an operation's contract."""


class InvalidState(RuntimeError):
    """Object is in the wrong state for the request (e.g. double normalisation)."""
