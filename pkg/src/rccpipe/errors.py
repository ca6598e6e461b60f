"""Exception hierarchy for the pipeline engine."""


class PipelineError(Exception):
    """Base class for all engine errors."""


class InvalidInput(PipelineError):
    pass


class InsufficientTissue(PipelineError):
    pass


class DegenerateStain(PipelineError):
    pass


class NotFound(PipelineError):
    pass


class SchemaMismatch(PipelineError):
    pass


class BackendError(PipelineError):
    pass


class StrategyUnavailable(PipelineError):
    pass


class TriageFailed(PipelineError):
    pass


class EmptySlide(PipelineError):
    pass


class NoTumorDetected(PipelineError):
    pass


class ReportInconsistent(PipelineError):
    pass


class ConfigError(PipelineError):
    pass
