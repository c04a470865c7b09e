"""Exception hierarchy shared by all modules.

Every error carries a short ``code`` so the CLI can report the failing
module error by name and map it to an exit status.
"""


class QVLabError(Exception):
    code = "QVLabError"


class DomainError(QVLabError, ValueError):
    code = "DomainError"


class SingularMetric(QVLabError, ArithmeticError):
    code = "SingularMetric"


class NormalizationError(QVLabError, ValueError):
    code = "NormalizationError"


class PivotFailure(QVLabError, ArithmeticError):
    code = "PivotFailure"


class DriftBlowup(QVLabError, ArithmeticError):
    code = "DriftBlowup"


class Unsupported(QVLabError, NotImplementedError):
    code = "Unsupported"


class NodeRegion(QVLabError, ValueError):
    code = "NodeRegion"


class StepSizeError(QVLabError, ArithmeticError):
    code = "StepSizeError"


class GridError(QVLabError, ValueError):
    code = "GridError"


class IllPosedError(QVLabError, ValueError):
    code = "IllPosedError"


class EigenError(QVLabError, ArithmeticError):
    code = "EigenError"


class TopologyError(QVLabError, ValueError):
    code = "TopologyError"


class ModeError(QVLabError, ValueError):
    code = "ModeError"


class VarianceBlowup(QVLabError, ArithmeticError):
    code = "VarianceBlowup"


class ConfigMismatch(QVLabError, ValueError):
    code = "ConfigMismatch"


class ConfigError(QVLabError, ValueError):
    """Schema violation; ``path`` points at the offending field."""

    code = "ConfigError"

    def __init__(self, message, path=""):
        super().__init__(message)
        self.path = path
