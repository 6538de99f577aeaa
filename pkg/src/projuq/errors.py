"""Exception hierarchy shared by all modules."""


class ProjUQError(Exception):
    """Base class for library errors."""


class DimensionMismatch(ProjUQError, ValueError):
    pass


class RankDeficient(ProjUQError):
    def __init__(self, column, message=None):
        self.column = column
        super().__init__(message or f"rank deficiency detected at column {column}")


class OutOfRange(ProjUQError):
    """Vector leaves the range of a (degenerate) covariance."""

    def __init__(self, residual, message=None):
        self.residual = residual
        super().__init__(message or f"vector has component outside covariance range (relative residual {residual:.3e})")


class IllPosedProjection(ProjUQError):
    pass


class IllPosedConditioning(ProjUQError):
    pass


class BreakdownAt(ProjUQError):
    """Krylov process became invariant after ``j`` basis vectors."""

    def __init__(self, j, message=None):
        self.j = j
        super().__init__(message or f"Krylov breakdown after {j} basis vectors")


class NotSpd(ProjUQError):
    def __init__(self, iteration, eta):
        self.iteration = iteration
        self.eta = eta
        super().__init__(f"nonpositive curvature {eta:.3e} at CG iteration {iteration}")


class DegenerateSample(ProjUQError):
    pass


class ImproperPosterior(ProjUQError):
    pass


class MatrixMarketError(ProjUQError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")
