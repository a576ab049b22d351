"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (see cli.py): usage errors are
handled by click itself (2), ValidationError -> 3, I/O family -> 4,
NumericError -> 5.
"""


class ScsegError(Exception):
    """Base class for package errors."""


class ValidationError(ScsegError):
    """Inputs or configuration violate a documented contract."""


class DataIOError(ScsegError):
    """Missing or unreadable data files."""


class FormatError(DataIOError):
    """An embedding file's header disagrees with its own payload."""


class CorruptionError(DataIOError):
    """An embedding file is truncated or fails its checksum."""


class EncoderInitError(DataIOError):
    """An encoder backend could not be constructed (e.g. missing weights)."""


class NumericError(ScsegError):
    """A non-finite value surfaced where the pipeline requires finite math."""
