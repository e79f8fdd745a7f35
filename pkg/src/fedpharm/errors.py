"""Error types shared across the pipeline.

Input-shaped problems (files, schemas, universes) and pipeline-degenerate
outcomes get their own classes so the CLI can map them to exit codes.
"""


class FedpharmError(Exception):
    """Base class for all pipeline errors."""


class MissingFile(FedpharmError):
    pass


class NonUtf8Input(FedpharmError):
    pass


class RaggedRow(FedpharmError):
    def __init__(self, path, line_no, expected, got):
        super().__init__(
            f"{path}: line {line_no} has {got} fields, header has {expected}"
        )
        self.line_no = line_no
        self.expected = expected
        self.got = got


class SchemaMismatch(FedpharmError):
    pass


class EmptyTarget(FedpharmError):
    pass


class AllRecordsRemoved(FedpharmError):
    pass


class MixedAdr(FedpharmError):
    pass


class LengthMismatch(FedpharmError):
    pass


class AllTablesFlagged(FedpharmError):
    pass


class UnknownDrug(FedpharmError):
    pass


class UnknownAdr(FedpharmError):
    pass


class ShapeMismatch(FedpharmError):
    pass


class SingleClass(FedpharmError):
    pass


class NonFiniteLoss(FedpharmError):
    pass


class DegenerateTableWarning(UserWarning):
    """A local classifier was fit on a single-class table."""
