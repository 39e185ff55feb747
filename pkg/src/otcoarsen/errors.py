"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions are incompatible for the requested operation."""


class DomainError(ValueError):
    """An entry violates the documented domain of an operation (e.g. log of
    a non-positive value, division by a near-zero denominator)."""


class ContractError(ValueError):
    """A call violates an interface precondition that is not a shape or
    entrywise-domain issue (non-scalar backward target, out-of-range counts,
    empty datasets, incompatible checkpoints...)."""


class UnderflowError(ArithmeticError):
    """A Sinkhorn scaling denominator fell below the representable guard
    threshold; the transport problem is too stiff for plain-domain scaling."""


class FormatError(ValueError):
    """A dataset file is malformed; carries the file and line number."""

    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


class DegenerateLabelsError(ValueError):
    """A classifier training split contains fewer than two classes."""
