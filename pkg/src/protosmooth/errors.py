"""Exception hierarchy.

``DataError`` subclasses signal bad inputs or files (CLI exit code 2);
``InvariantError`` signals a broken internal guarantee (exit code 3).
"""


class ProtosmoothError(Exception):
    pass


class DataError(ProtosmoothError, ValueError):
    pass


class InvariantError(ProtosmoothError, AssertionError):
    pass


class ShapeError(DataError):
    pass


class DomainError(DataError):
    pass


class MissingEmbeddingError(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class DegenerateEmbeddingError(DataError):
    pass


class NotDifferentiableError(ProtosmoothError, TypeError):
    pass


class NoOracleError(ProtosmoothError, TypeError):
    pass


class DivergenceError(ProtosmoothError, ArithmeticError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step}: loss={loss!r}")
        self.step = step
        self.loss = loss


class ParseError(DataError):
    def __init__(self, msg, offset=None):
        if offset is not None:
            msg = f"{msg} (at byte offset {offset})"
        super().__init__(msg)
        self.offset = offset


class SchemaError(DataError):
    pass


class ValidationError(DataError):
    pass


class MissingSupportError(DataError):
    pass


class DegeneratePrototypesError(DataError):
    pass


class DependenceError(ProtosmoothError, ValueError):
    pass


class InsufficientDataError(DataError):
    pass
