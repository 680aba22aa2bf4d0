"""Exception hierarchy.

Every error carries a short machine-readable ``code`` used by the CLI (exit
status) and the HTTP service (error body).
"""


class DnsmosError(Exception):
    code = "error"
    #: CLI exit status: 2 for bad data, 3 for numeric failure.
    exit_status = 2


# audio
class UnsupportedFormat(DnsmosError):
    code = "unsupported_format"


class CorruptHeader(DnsmosError):
    code = "corrupt_header"


class UnsupportedRate(DnsmosError):
    code = "unsupported_rate"


class EmptyClip(DnsmosError):
    code = "empty_clip"


# features
class WrongLength(DnsmosError):
    code = "wrong_length"


# nnet
class ShapeMismatch(DnsmosError):
    code = "shape_mismatch"


class NonFiniteActivation(DnsmosError):
    code = "non_finite"
    exit_status = 3


class LengthMismatch(DnsmosError):
    code = "length_mismatch"


class StaleTrace(DnsmosError):
    code = "stale_trace"


class EmptyDataset(DnsmosError):
    code = "empty_dataset"


class ChecksumMismatch(DnsmosError):
    code = "checksum_mismatch"


class VersionMismatch(DnsmosError):
    code = "version_mismatch"


class ShapeTableMismatch(DnsmosError):
    code = "shape_table_mismatch"


# selfteach
class AlphaSumViolation(DnsmosError):
    code = "alpha_sum"


class SpecShapeError(DnsmosError):
    code = "spec_shape"


# eval
class DegenerateInput(DnsmosError):
    code = "degenerate_input"


class MissingPrediction(DnsmosError):
    code = "missing_prediction"


class GroupTooSmall(DnsmosError):
    code = "group_too_small"


class MissingColumn(DnsmosError):
    code = "missing_column"
