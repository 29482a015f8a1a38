"""Exception types shared across the library."""


class RangeError(ValueError):
    """A value does not fit the requested bit width or candidate range."""


class DimensionError(ValueError):
    """Mismatched widths, shapes, or vector lengths."""


class UnsupportedEncodingError(ValueError):
    """A bit pattern outside the supported encoding subset (denormal/Inf/NaN)."""


class AccumulatorOverflowError(OverflowError):
    """An integer accumulation left its declared width; never silently wrapped."""


class ArchiveError(ValueError):
    """A trace archive is missing targets or is structurally invalid."""
