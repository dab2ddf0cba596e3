"""Exception hierarchy.

The CLI maps :class:`MeasurementError` (and subclasses) to exit code 2; anything
raised as a plain ``ValueError`` is treated as a usage/validation problem.
"""


class MeasurementError(RuntimeError):
    """The inputs were valid but no diameter could be measured."""


class EmptyCloudError(MeasurementError):
    """No masked pixel carried a valid depth value."""


class DegenerateAxisError(MeasurementError):
    """The cloud does not define a principal direction."""


class NoValidSlicesError(MeasurementError):
    """Every slice fell below the minimum point count."""


class RenderError(ValueError):
    """The synthetic stalk is not visible from the requested camera."""
