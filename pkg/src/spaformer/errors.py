class ContractError(ValueError):
    """An argument violates an operation's precondition (shape, range, arity)."""


class EmptyRegionError(ContractError):
    """A metric was requested over a mask region with no pixels in it."""


class NonFiniteError(FloatingPointError):
    def __init__(self, what: str, message: str | None = None):
        self.what = what
        super().__init__(message or f"non-finite values in {what}")
