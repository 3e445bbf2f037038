"""Exception types shared across the diagnosis pipeline."""


class LogTriageError(Exception):
    """Base class for all package errors."""


class EmptyBundleError(LogTriageError):
    """No log files were found under the given job directory."""


class BundleIoError(LogTriageError):
    """A log file could not be read; carries the offending path."""

    def __init__(self, path, reason):
        super().__init__(f"cannot read {path}: {reason}")
        self.path = path
        self.reason = reason


class HeaderMismatch(LogTriageError):
    """A line does not match the configured header grammar."""


class LengthMismatch(LogTriageError):
    """Two sequences that must align have different lengths."""


class EmptyHistoryError(LogTriageError):
    """No successful jobs were supplied to build the normal event pool."""


class TooFewNodesError(LogTriageError):
    """Fewer than 4 node vectors; isolation depth is meaningless below that."""


class EmptySequenceError(LogTriageError):
    """DTW/similarity called with an empty iteration sequence."""


class DomainError(LogTriageError):
    """Argument outside the mathematical domain of a function."""


class NoIterativeStage(LogTriageError):
    """No node's log stream contains an iterative-training span.

    Warning-level: iteration analysis is skipped, spatial analysis still runs.
    """


class NoIterationMarkers(LogTriageError):
    """An iterative-training span contains no per-iteration marker records."""


class DuplicatePatternId(LogTriageError):
    """A fault pattern with this id already exists in the library."""


class PatternValidationError(LogTriageError):
    """A fault pattern violates its invariants (e.g. empty signature list)."""


class InvalidSpecError(LogTriageError):
    """A synthetic workload spec or fault injection violates its invariants."""
