"""Integer-microsecond time base used by the simulator and transition drivers.

All externally supplied durations are given in milliseconds. Internally every
duration and timestamp is an integer count of microseconds so that equality
assertions on windows and downtimes are exact. A millisecond value that does
not correspond to a whole number of microseconds is rejected rather than
silently rounded.
"""

from __future__ import annotations

US_PER_MS = 1000
_REL_TOL = 1e-9


class TimeConversionError(ValueError):
    """A millisecond quantity does not map to an integer microsecond count."""


def ms_to_us(ms: float, *, what: str = "duration") -> int:
    """Convert milliseconds to integer microseconds, exactly or not at all.

    Float noise from decimal literals (0.98 ms -> 980.0000000000001 us) is
    tolerated; genuinely fractional microsecond values are an error.
    """
    if ms < 0:
        raise TimeConversionError(f"{what} must be >= 0, got {ms}")
    raw = ms * US_PER_MS
    us = round(raw)
    if abs(raw - us) > _REL_TOL * max(1.0, abs(us)):
        raise TimeConversionError(
            f"{what} of {ms} ms is not a whole number of microseconds"
        )
    return us


def us_to_ms(us: int) -> float:
    """Express an integer microsecond count in milliseconds."""
    return us / US_PER_MS
