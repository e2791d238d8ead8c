"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration-class errors exit 2,
staleness exits 3, numeric failures exit 4.
"""


class CohortGraphError(Exception):
    """Base class for all package errors."""


class ConfigError(CohortGraphError):
    """Invalid configuration value or combination."""


class StalenessError(CohortGraphError):
    """A required upstream artifact is missing or out of date."""


class NumericError(CohortGraphError):
    """Non-finite values or other numeric breakdown during computation."""


class ParseError(CohortGraphError):
    """Malformed input file; carries file/line/column context."""

    def __init__(self, message, file=None, line=None, column=None):
        parts = [message]
        if file is not None:
            parts.append(f"file={file}")
        if line is not None:
            parts.append(f"line={line}")
        if column is not None:
            parts.append(f"column={column}")
        super().__init__(" ".join(str(p) for p in parts))
        self.file = file
        self.line = line
        self.column = column


class IntegrityError(CohortGraphError):
    """Referential integrity violated between tables."""


class EncodingError(CohortGraphError):
    """A value cannot be encoded under the fixed feature vocabulary."""


class CodeLookupError(CohortGraphError):
    """ICD codes missing from the code/text map."""


class ShapeError(CohortGraphError):
    """Array shapes do not conform (includes block alignment errors)."""


class CorruptFileError(CohortGraphError):
    """Binary artifact failed structural or checksum validation."""


class UnsupportedVersionError(CorruptFileError):
    """Binary artifact has an unknown format version."""


class StateError(CohortGraphError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class MetricUndefinedError(CohortGraphError):
    """Metric undefined for the given inputs (e.g. one-class labels)."""


class DegenerateSampleError(CohortGraphError):
    """Statistical test input is degenerate (e.g. zero variance)."""
