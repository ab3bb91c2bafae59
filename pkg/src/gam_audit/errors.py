"""Exception hierarchy. The CLI maps each family onto an exit code."""


class GamAuditError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(GamAuditError):
    """Invalid configuration: missing columns, bad thresholds, unknown keys."""


class DataError(GamAuditError):
    """Input data is unusable (empty, malformed, degenerate)."""


class ParseError(DataError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class DegenerateColumnError(DataError):
    def __init__(self, column):
        super().__init__(f"column {column!r} has zero variance and cannot be standardized")
        self.column = column


class SplitError(DataError):
    pass


class BasisError(GamAuditError):
    pass


class SingularFitError(GamAuditError):
    def __init__(self, feature, message=None):
        super().__init__(message or f"penalized system is rank deficient at feature {feature!r}")
        self.feature = feature


class PredictionError(DataError):
    pass


class RuleError(GamAuditError):
    pass


class GenerationError(ConfigError):
    pass


class TrainingError(GamAuditError):
    pass


class DetectionError(GamAuditError):
    pass
