"""Exception and warning classes raised across the package."""


class CrowdQCError(Exception):
    """Base class for all package errors."""


class DatasetError(CrowdQCError, ValueError):
    pass


class MissingColumn(DatasetError):
    def __init__(self, column, available=()):
        self.column = column
        self.available = list(available)
        super().__init__(f"missing required column {column!r} (found: {', '.join(self.available)})")


class UnknownCategoryLabel(DatasetError):
    def __init__(self, label, labels, line=None):
        self.label = label
        self.labels = list(labels)
        self.line = line
        where = f" on line {line}" if line is not None else ""
        super().__init__(f"unknown category label {label!r}{where}; declared labels: {self.labels}")


class DuplicateWorkerTaskPair(DatasetError):
    def __init__(self, worker_id, task_id, line=None):
        self.worker_id = worker_id
        self.task_id = task_id
        self.line = line
        where = f" on line {line}" if line is not None else ""
        super().__init__(f"duplicate record for worker {worker_id!r}, task {task_id!r}{where}")


class TooFewObservations(DatasetError):
    def __init__(self, level, ident, count):
        self.level = level
        self.ident = ident
        self.count = count
        super().__init__(f"{level} {ident!r} has {count} record(s); at least 2 are required")


class InsufficientData(CrowdQCError, ValueError):
    pass


class InsufficientRaters(CrowdQCError, ValueError):
    pass


class AllZeroComponents(CrowdQCError, ArithmeticError):
    """Every variance component is zero, so the variance ratio is undefined."""


class EmptyContrast(CrowdQCError, ValueError):
    pass


class ScaleMismatch(CrowdQCError, ValueError):
    pass


class SequenceTooShort(CrowdQCError, ValueError):
    pass


class NotADistribution(CrowdQCError, ValueError):
    pass


class DimensionMismatch(CrowdQCError, ValueError):
    pass


class ThresholdMismatch(CrowdQCError, ValueError):
    pass


class CalibrationFailure(CrowdQCError, RuntimeError):
    pass


class WorkerNotFound(CrowdQCError, KeyError):
    pass


class NonConvergence(CrowdQCError, RuntimeError):
    pass


class RefitNonConvergence(NonConvergence):
    pass


class ConvergenceWarning(UserWarning):
    pass


class SeparationWarning(UserWarning):
    pass


class DegenerateCategoryWarning(UserWarning):
    pass
