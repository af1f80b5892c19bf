"""Exception hierarchy shared by every stage of the pipeline.

Each exception carries the CLI exit code it maps to (2 config, 3 data,
4 numeric).
"""


class PipelineError(Exception):
    exit_code = 1


class ConfigError(PipelineError):
    exit_code = 2


class ParameterError(ConfigError):
    """A scalar hyper-parameter is outside its admissible range."""


class DimensionError(ConfigError):
    """Operand shapes do not agree."""


class TemplateError(ConfigError):
    """A prompt template slot was left unbound or bound to an empty value."""


class DataError(PipelineError):
    exit_code = 3


class InputError(DataError):
    """Empty or malformed input to an operation."""


class LengthError(DataError):
    """A token sequence exceeds the model's maximum length."""


class GenerationError(DataError):
    """The synthetic corpus cannot satisfy its uniqueness guarantees."""


class NumericError(PipelineError):
    exit_code = 4

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DegenerateInputError(NumericError):
    """Zero-norm vector where a direction is required."""
