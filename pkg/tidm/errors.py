class TidmError(Exception):
    """Base class for every error raised by the engine."""

    exit_code = 3
    code = "E_RUNTIME"


class UsageError(TidmError):
    exit_code = 1
    code = "E_USAGE"


class InputError(TidmError, ValueError):
    """Invalid argument, shape or configuration value."""

    exit_code = 2
    code = "E_INPUT"


class ShapeError(InputError):
    code = "E_SHAPE"


class UnknownTokenError(InputError):
    code = "E_TOKEN"

    def __init__(self, word: str, vocab_path: str):
        super().__init__(f"unknown word {word!r} (vocabulary: {vocab_path})")
        self.word = word
        self.vocab_path = vocab_path


class NumericalError(TidmError, ArithmeticError):
    code = "E_NUMERIC"


class TrainingDivergedError(NumericalError):
    code = "E_DIVERGED"


class CheckpointError(TidmError):
    code = "E_CHECKPOINT"


class CheckpointFormatError(CheckpointError):
    code = "E_FORMAT"


class TruncatedCheckpointError(CheckpointError):
    code = "E_TRUNCATED"


class UnsupportedVersionError(CheckpointError):
    code = "E_VERSION"


class ChecksumMismatchError(CheckpointError):
    code = "E_CHECKSUM"


class DatasetError(TidmError):
    """A dataset split on disk is incomplete or unreadable."""

    code = "E_DATASET"
