"""Loopback multi-process harness: real sockets, shaped bandwidth, wall clocks."""

from .shaper import ShapedChannel, ShaperConfig, TokenBucket, max_window_rate_mbps, shape
from .wire import FrameKind, WireError, WireFrame, decode, encode, read_frame, write_frame

_HARNESS_NAMES = ("LiveConfig", "LiveError", "LiveHarness", "measure_transition",
                  "start_roles")

__all__ = [
    "FrameKind",
    "LiveConfig",
    "LiveError",
    "LiveHarness",
    "ShapedChannel",
    "ShaperConfig",
    "TokenBucket",
    "WireError",
    "WireFrame",
    "decode",
    "encode",
    "max_window_rate_mbps",
    "measure_transition",
    "read_frame",
    "shape",
    "start_roles",
    "write_frame",
]


def __getattr__(name: str):
    # Loaded on first use so that ``python -m neukonfig.live.roles`` does not
    # import the roles module twice (runpy warns when the -m target is already
    # in sys.modules).
    if name in _HARNESS_NAMES:
        from . import harness

        return getattr(harness, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
