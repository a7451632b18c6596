"""Exception hierarchy shared by the pipeline stages."""


class MedMatchError(ValueError):
    """Base class for all pipeline errors."""


class InputError(MedMatchError):
    """Unreadable, empty or malformed input."""


class SchemaError(InputError):
    """A column named by the schema is missing from the input."""


class IntegrityError(InputError):
    """The data violate a structural invariant (e.g. U varies within a cluster)."""


class ParameterError(MedMatchError):
    """A tuning or configuration parameter is out of range."""


class DegenerateModelError(MedMatchError):
    """A fitted model or smoother has no usable variation."""


class EmptyResultError(MedMatchError):
    """An operation would leave no data behind."""


class InsufficientDataError(MedMatchError):
    """Too few rows for the requested statistic."""


class TuningError(MedMatchError):
    """Every candidate in a search failed."""


class InferenceError(MedMatchError):
    """Too many bootstrap replicates failed."""


class StudyError(MedMatchError):
    """Too many simulation replicates failed."""
