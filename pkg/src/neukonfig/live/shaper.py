"""In-process bandwidth shaping: a token bucket paces frame release times.

The bucket holds up to ``burst`` megabits and refills at ``rate`` Mbps. A
frame may leave once the bucket covers its size; the computed release time is
stamped into the frame header, the sender sleeps until then (plus the
configured one-way latency), and only then writes to the socket. Release
times, not socket timings, are the shaping contract: under saturation
consecutive releases are spaced by exactly size/rate, so throughput measured
over any sliding window never exceeds the configured rate.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, replace

from .wire import WireFrame, encode


class ShaperError(ValueError):
    """Raised for invalid shaping parameters."""


@dataclass(frozen=True)
class ShaperConfig:
    rate_mbps: float
    burst_mb: float = 1.0
    added_latency_ms: float = 0.0
    initial_fill: float = 0.0  # fraction of the burst available at start

    def __post_init__(self):
        if self.rate_mbps <= 0:
            raise ShaperError(f"rate must be > 0 Mbps, got {self.rate_mbps}")
        if self.burst_mb <= 0:
            raise ShaperError(f"burst must be > 0 Mb, got {self.burst_mb}")
        if self.added_latency_ms < 0:
            raise ShaperError("added_latency_ms must be >= 0")
        if not 0 <= self.initial_fill <= 1:
            raise ShaperError("initial_fill must be in [0, 1]")


class TokenBucket:
    """Pure release-time arithmetic; the caller supplies the clock readings.

    Oversized frames are allowed: the deficit is paid off at the configured
    rate, which degenerates to pure pacing when the burst is small.
    """

    def __init__(self, config: ShaperConfig, now_s: float = 0.0):
        self._rate = config.rate_mbps  # megabits per second
        self._cap = config.burst_mb
        self._tokens = config.burst_mb * config.initial_fill
        self._last = now_s

    @property
    def rate_mbps(self) -> float:
        return self._rate

    def _refill(self, now_s: float) -> None:
        if now_s > self._last:
            self._tokens = min(self._cap, self._tokens + (now_s - self._last) * self._rate)
            self._last = now_s

    def set_rate(self, rate_mbps: float, now_s: float) -> None:
        if rate_mbps <= 0:
            raise ShaperError(f"rate must be > 0 Mbps, got {rate_mbps}")
        self._refill(now_s)
        self._rate = rate_mbps

    def release_at(self, size_mb: float, now_s: float) -> float:
        """Consume tokens for one frame and return its release time."""
        if size_mb < 0:
            raise ShaperError("size must be >= 0")
        self._refill(now_s)
        self._tokens -= size_mb
        if self._tokens >= 0:
            return now_s
        release = now_s + (-self._tokens) / self._rate
        self._tokens = 0.0
        self._last = release
        return release


class ShapedChannel:
    """One shaped sender over a socket; safe for a single sending thread."""

    def __init__(self, sock, config: ShaperConfig, clock=time.monotonic):
        self._sock = sock
        self._clock = clock
        self._config = config
        self._latency_s = config.added_latency_ms / 1000.0
        self._bucket = TokenBucket(config, now_s=clock())
        self._lock = threading.Lock()
        self.releases: list[tuple[float, float, float]] = []  # (release_s, size_mb, rate)

    def set_rate(self, rate_mbps: float) -> None:
        with self._lock:
            self._bucket.set_rate(rate_mbps, self._clock())

    @property
    def rate_mbps(self) -> float:
        return self._bucket.rate_mbps

    def send(self, frame: WireFrame) -> float:
        """Pace, stamp, and transmit one frame; returns the release time."""
        size_mb = len(frame.payload) * 8 / 1e6
        with self._lock:
            release = self._bucket.release_at(size_mb, self._clock())
            rate = self._bucket.rate_mbps
            self.releases.append((release, size_mb, rate))
        due = release + self._latency_s
        while True:
            wait = due - self._clock()
            if wait <= 0:
                break
            time.sleep(wait)
        stamped = replace(frame, send_ts_us=round(release * 1e6))
        self._sock.sendall(encode(stamped))
        return release

    def send_raw(self, frame: WireFrame) -> None:
        """Transmit a control frame immediately, bypassing the shaper."""
        self._sock.sendall(encode(frame))


def shape(sock, config: ShaperConfig, clock=time.monotonic) -> ShapedChannel:
    """Wrap an established socket in a shaped sending channel."""
    return ShapedChannel(sock, config, clock=clock)


def max_window_rate_mbps(
    releases: list[tuple[float, float, float]], window_s: float = 1.0
) -> float:
    """Worst throughput over any sliding window, from a channel's release log.

    A release marks the instant the last bit clears the emulated link, so a
    frame occupies the wire for the size/rate seconds ending at its release.
    Paced releases are spaced by at least that serialisation time, making the
    intervals of a bucket-draining stream abut without overlapping; frames
    sent on stored burst credit may overlap earlier intervals, which correctly
    shows up here as a window above the sustained rate. Window extremes occur
    at interval boundaries, which is where candidate windows are anchored.
    """
    if window_s <= 0:
        raise ShaperError("window must be positive")
    spans = [
        (release - size / rate, release, size)
        for release, size, rate in releases
        if size > 0
    ]
    if not spans:
        return 0.0

    def volume(t0: float) -> float:
        t1 = t0 + window_s
        total = 0.0
        for start, end, size in spans:
            overlap = min(end, t1) - max(start, t0)
            if overlap > 0:
                total += size * overlap / (end - start)
        return total

    anchors = []
    for start, end, _ in spans:
        anchors.extend((start, end, start - window_s, end - window_s))
    return max(volume(t) for t in anchors) / window_s
