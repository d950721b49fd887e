"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of the operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class FormatError(ValueError):
    """A binary container is malformed; `offset` is the failing byte position."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(RuntimeError):
    """A numerical routine failed to converge or produced non-finite values."""


class TrainingDiverged(NumericError):
    """Loss became non-finite; carries the step index and the offending term."""

    def __init__(self, step, term, values):
        super().__init__(
            f"non-finite loss at step {step}: term '{term}' = {values[term]!r} "
            f"(all terms: {values})"
        )
        self.step = step
        self.term = term
        self.values = values


class DegeneracyError(ValueError):
    """Input data is rank-deficient for the requested decomposition."""


class GenerationError(RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""
