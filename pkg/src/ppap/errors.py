"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """An argument violates a documented precondition."""


class InvalidState(RuntimeError):
    """A computation reached a state where its result is undefined."""


class FormatError(ValueError):
    """An input file is missing a required field or is malformed."""
