"""Shared exception types."""


class ViewsiftError(Exception):
    """Base class for all toolkit-specific failures."""


class FormatError(ViewsiftError):
    """A tensor file violates the VSF1 wire format, or its header lies about the payload."""


class ManifestError(ViewsiftError):
    """A set manifest is inconsistent: missing files, duplicate ids, grid mismatch, missing roles."""


class DegenerateInputError(ViewsiftError):
    """An operation received input with no usable spread (e.g. constant scores, max == min)."""
