"""Exception taxonomy shared across the package.

Every library error derives from :class:`OvdetError`, which itself derives
from ``ValueError`` so callers that do not care about the fine-grained kind
can catch the usual builtin.
"""


class OvdetError(ValueError):
    """Base class for all errors raised by this package."""


class DimensionError(OvdetError):
    """Array shapes or extents are inconsistent with the operation."""


class DegenerateInputError(OvdetError):
    """An input is mathematically degenerate (e.g. a near-zero vector
    where a direction is required)."""


class InputError(OvdetError):
    """An argument value violates the operation's preconditions."""


class NonFiniteError(InputError):
    """NaN or Inf encountered where only finite values are legal."""


class LoadError(OvdetError):
    """A file does not match its documented schema or contains
    invalid values."""


class PipelineError(OvdetError):
    """A labeling-pipeline stage was invoked out of order or received a
    malformed intermediate product."""
