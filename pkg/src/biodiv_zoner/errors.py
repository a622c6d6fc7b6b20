"""Exception hierarchy shared by all pipeline stages."""


class BiodivError(Exception):
    """Base class for every error raised by this package."""


# census ingest
class MissingColumn(BiodivError):
    pass


class MalformedRow(BiodivError):
    def __init__(self, row, field, value):
        self.row = row
        self.field = field
        self.value = value
        super().__init__(f"row {row}: cannot parse field {field!r} (value {value!r})")


class DuplicateStem(BiodivError):
    pass


class OutOfBounds(BiodivError):
    pass


# diversity / smoothing / variogram
class EmptyCell(BiodivError):
    pass


class BadConfig(BiodivError):
    pass


class OutOfDomain(BiodivError):
    pass


class NonConvergence(BiodivError):
    pass


class BasisMismatch(BiodivError):
    pass


# spatial basis
class DuplicateSites(BiodivError):
    pass


class SingularV(BiodivError):
    pass


class EigenFailure(BiodivError):
    pass


# mixture model
class NonPD(BiodivError):
    pass


class DegenerateRow(BiodivError):
    pass


class EmptyCluster(BiodivError):
    pass


class GlassoNonConvergence(BiodivError):
    def __init__(self, gap, n_iter):
        self.gap = gap
        self.n_iter = n_iter
        super().__init__(f"graphical lasso stopped after {n_iter} sweeps with duality gap {gap:.3e}")


class LogitNonConvergence(BiodivError):
    pass


class BadK(BiodivError):
    pass


class AllRestartsFailed(BiodivError):
    pass


class LengthMismatch(BiodivError):
    pass


class ConvergenceWarning(UserWarning):
    """Emitted when an iterative solver hits its iteration cap."""
