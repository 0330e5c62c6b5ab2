"""Exception types shared across the package."""


class SafeNmpcError(Exception):
    pass


class ConfigurationError(SafeNmpcError, ValueError):
    """Bad dimensions, inconsistent parameters or unparsable configuration."""


class NumericError(SafeNmpcError, ArithmeticError):
    """A state or estimate went non-finite."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class SynthesisError(SafeNmpcError):
    """An offline design problem was infeasible."""

    def __init__(self, message, tag=None):
        super().__init__(message)
        self.tag = tag


class BuildError(SafeNmpcError):
    """An optimal control problem could not be assembled (e.g. empty tightened set)."""

    def __init__(self, message, stage=None, row=None):
        super().__init__(message)
        self.stage = stage
        self.row = row


class ArtifactError(SafeNmpcError):
    """A design artifact failed to load or violates one of its invariants."""

    def __init__(self, message, invariant=None):
        super().__init__(message)
        self.invariant = invariant
