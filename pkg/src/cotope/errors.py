"""Exception hierarchy shared across the package."""


class CotopeError(Exception):
    """Base class for every error raised by this package."""


class ArgumentError(CotopeError, ValueError):
    """An argument lies outside its documented domain."""


class TripleParseError(CotopeError, ValueError):
    def __init__(self, path, line_number, message):
        self.path = str(path)
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {message}")


class GraphIntegrityError(CotopeError, ValueError):
    def __init__(self, message, offenders=()):
        self.offenders = list(offenders)
        shown = ", ".join(map(str, self.offenders[:20]))
        more = "" if len(self.offenders) <= 20 else f" (+{len(self.offenders) - 20} more)"
        super().__init__(f"{message}: {shown}{more}" if self.offenders else message)


class TruncatedWalkError(CotopeError):
    """A walk reached an entity with no outgoing edges before its hop budget."""

    def __init__(self, partial, requested_hops):
        self.partial = partial
        self.requested_hops = requested_hops
        super().__init__(
            f"walk truncated after {partial.hop_count} of {requested_hops} hops"
        )


class SamplingExhaustedError(CotopeError):
    def __init__(self, message, partial):
        self.partial = partial
        super().__init__(message)


class TemplateMissError(CotopeError, KeyError):
    def __init__(self, relation_id):
        self.relation_id = relation_id
        super().__init__(f"no template for relation {relation_id!r}")

    def __str__(self):
        return self.args[0]


class ConfigurationError(CotopeError, ValueError):
    """Inputs are individually valid but do not fit together."""


class LoggingError(CotopeError):
    pass


class StalenessError(CotopeError):
    """Cached propensities do not belong to the supplied policy snapshots."""


class ValidationError(CotopeError, ValueError):
    pass


class NumericalError(CotopeError, FloatingPointError):
    def __init__(self, message, trace=None):
        self.trace = trace
        super().__init__(message)


class EnumerationBoundError(CotopeError):
    pass


class StageError(CotopeError):
    """A pipeline stage failed; ``stage`` names it and ``cause`` holds the original error."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


class VerificationFailure(CotopeError):
    pass
