"""Exception hierarchy shared by all confedlearn modules."""


class ConfedError(Exception):
    """Base class for every error raised by confedlearn."""


class RejectedInputError(ConfedError, ValueError):
    """Input failed a precondition (shape, width, alignment, ...)."""


class ParseError(ConfedError, ValueError):
    """A serialized artifact could not be decoded."""


class CalibrationError(ConfedError, RuntimeError):
    """Prevalence calibration found no feasible intercept."""


class DegenerateLabelError(RejectedInputError):
    """Training labels contain a single class."""


class UndefinedMetricError(ConfedError, ValueError):
    """A metric is undefined for the given labels (e.g. one class only)."""


class AuditFailure(ConfedError, AssertionError):
    """An isolation rule was violated.

    Attributes
    ----------
    silo : int or str
        Offending silo id, or ``"central"``/``"message"``.
    rule : str
        One of ``"a"``, ``"b"``, ``"c"``.
    """

    def __init__(self, silo, rule, detail=""):
        self.silo = silo
        self.rule = rule
        self.detail = detail
        super().__init__(f"silo {silo}: rule ({rule}) violated: {detail}")


class ConfigError(ConfedError, ValueError):
    """Experiment configuration is invalid; ``path`` names the field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")
