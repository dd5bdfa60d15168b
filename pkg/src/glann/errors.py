"""Exception hierarchy shared by all glann modules.

Argument validation raises the builtin ``ValueError``; the classes below cover
the cases callers are expected to tell apart (the CLI maps them to exit codes).
"""


class GlannError(Exception):
    """Base class for glann errors."""


class FormatError(GlannError):
    """Input file or directory does not have the expected layout."""


class LengthMismatchError(FormatError):
    """Payload is shorter or longer than its header promises."""


class NumericError(GlannError, ArithmeticError):
    """A computation produced a non-finite or out-of-domain value."""


class StalePoolError(GlannError, RuntimeError):
    """A noise pool was queried after the mapper moved past it."""


class ConfigurationError(GlannError):
    """Components were combined in an incompatible way."""


class CheckpointError(FormatError):
    """Base class for checkpoint read failures."""


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    def __init__(self, file_version, reader_version):
        super().__init__(
            f"checkpoint format version {file_version} cannot be read by "
            f"reader version {reader_version}"
        )
        self.file_version = file_version
        self.reader_version = reader_version


class MissingTensorError(CheckpointError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class PipelineError(GlannError):
    """A pipeline stage failed; carries the stage name and last good checkpoint."""

    def __init__(self, stage, last_checkpoint, cause):
        super().__init__(
            f"stage {stage!r} failed ({cause}); last completed checkpoint: "
            f"{last_checkpoint or 'none'}"
        )
        self.stage = stage
        self.last_checkpoint = last_checkpoint
        self.cause = cause
