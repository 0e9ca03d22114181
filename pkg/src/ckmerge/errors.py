"""Exception taxonomy shared by all modules.

Every failure the toolkit can report maps onto one of the classes below,
and each class carries the process exit code the CLI uses for it:

    2  malformed or incompatible inputs (format, integrity, shapes, provenance)
    3  bad configuration (missing coefficients, invalid recipe fields)
    4  I/O failures (unreadable/unwritable paths)
"""


class CkmergeError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 2


class FormatError(CkmergeError):
    """File is not a well-formed named-tensor container."""

    exit_code = 2


class IntegrityError(FormatError):
    """Container header and payload disagree (truncation, bad offsets)."""

    exit_code = 2


class CompatibilityError(CkmergeError):
    """Checkpoints/traces do not share the required names or shapes."""

    exit_code = 2


class ProvenanceError(CompatibilityError):
    """Inputs come from different backbones or calibration sets."""

    exit_code = 2


class InsufficientDataError(CkmergeError):
    """Too few samples for the requested estimator."""

    exit_code = 2


class ConfigurationError(CkmergeError):
    """Invalid or incomplete run configuration."""

    exit_code = 3
