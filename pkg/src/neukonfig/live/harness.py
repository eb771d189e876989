"""Parent-side control of a live run: spawn the roles, drive transitions.

The harness starts a coordinator subprocess, which in turn spawns the device,
edge, and cloud workers. All measurement happens in the coordinator; the
harness sends commands over the parent control connection, mirrors the event
stream for its own assertions, and rebuilds
:class:`~neukonfig.strategies.TransitionReport` objects from the replies.

Typical use::

    with start_roles(LiveConfig(fps=10.0)) as harness:
        report = measure_transition(harness, "pause_resume")
        print(report.t_downtime_ms)
"""

from __future__ import annotations

import json
import os
import socket
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field

from ..pipeline import (
    DEFAULT_CONTAINER_MB,
    DEFAULT_PIPELINE_MB,
    DEFAULT_TIMING,
    MemoryFootprint,
    TimingParams,
)
from ..strategies import STRATEGY_NAMES, TransitionReport
from .roles import ENV_CONFIG, ControlLink, mono_us
from .wire import WireError, read_frame

_REPLIES = frozenset({
    "ready", "startup_error", "transition_done", "transition_error",
    "killed", "pong", "bye",
})


class LiveError(RuntimeError):
    """A live run failed to start, lost a role, or timed out."""


@dataclass(frozen=True)
class LiveConfig:
    """Settings for one live run; written to a JSON file the roles read."""

    profile: str = "edgecam-lite"
    fps: float = 10.0
    queue_capacity: int = 1
    bandwidth_mbps: float = 20.0
    alt_bandwidth_mbps: float = 5.0
    latency_ms: float = 20.0
    burst_mb: float = 1.0
    container_mb: float = DEFAULT_CONTAINER_MB
    pipeline_mb: float = DEFAULT_PIPELINE_MB
    standby_mode: str = "lane"

    def __post_init__(self):
        if self.fps < 0:
            raise LiveError(f"fps must be >= 0, got {self.fps}")
        if self.queue_capacity < 0:
            raise LiveError(f"queue_capacity must be >= 0, got {self.queue_capacity}")
        if self.standby_mode not in ("lane", "worker", "none"):
            raise LiveError(f"standby_mode must be lane, worker, or none, "
                            f"got {self.standby_mode!r}")

    def to_doc(self) -> dict:
        return {
            "profile": self.profile,
            "fps": self.fps,
            "queue_capacity": self.queue_capacity,
            "bandwidth_mbps": self.bandwidth_mbps,
            "alt_bandwidth_mbps": self.alt_bandwidth_mbps,
            "latency_ms": self.latency_ms,
            "burst_mb": self.burst_mb,
            "container_mb": self.container_mb,
            "pipeline_mb": self.pipeline_mb,
            "standby_mode": self.standby_mode,
        }


def _timing_doc(timing: TimingParams) -> dict:
    return {
        "t_update_ms": timing.t_update,
        "t_switch_ms": timing.t_switch,
        "t_initialisation_ms": timing.t_initialisation,
        "t_exec_ms": timing.t_exec,
        "t_plan_update_ms": timing.t_plan_update,
    }


@dataclass
class LiveHarness:
    """Owns the coordinator subprocess and the parent control connection."""

    config: LiveConfig = field(default_factory=LiveConfig)
    startup_timeout_s: float = 30.0

    def __post_init__(self):
        self._proc: subprocess.Popen | None = None
        self._sock: socket.socket | None = None
        self._link: ControlLink | None = None
        self._config_path: str | None = None
        self._events: list[dict] = []
        self._replies: list[dict] = []
        self._reply_cursor = 0
        self._cond = threading.Condition()
        self._eof = False
        self._stopped = False
        self.initial_split: int | None = None
        self.transition_replies: list[dict] = []

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> "LiveHarness":
        if self._proc is not None:
            raise LiveError("harness already started")
        fd, self._config_path = tempfile.mkstemp(prefix="neukonfig-live-",
                                                 suffix=".json")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(self.config.to_doc(), fh)
        env = dict(os.environ)
        env[ENV_CONFIG] = self._config_path
        self._proc = subprocess.Popen(
            [sys.executable, "-m", "neukonfig.live.roles", "--role", "coordinator"],
            stdout=subprocess.PIPE,
            env=env,
            text=True,
        )
        port = self._read_port()
        self._sock = socket.create_connection(("127.0.0.1", port), timeout=10.0)
        self._sock.settimeout(None)
        self._link = ControlLink(self._sock)
        self._link.send_json({"event": "register", "role": "parent"})
        threading.Thread(target=self._read_loop, daemon=True).start()
        ready = self._wait_reply(("ready", "startup_error"), self.startup_timeout_s,
                                 "the run to come up")
        if ready["event"] == "startup_error":
            message = ready.get("message", "unknown startup failure")
            self.stop()
            raise LiveError(f"live run failed to start: {message}")
        self.initial_split = int(ready["split"])
        return self

    def _read_port(self) -> int:
        assert self._proc is not None and self._proc.stdout is not None
        result: list[str] = []

        def read_line():
            result.append(self._proc.stdout.readline())

        reader = threading.Thread(target=read_line, daemon=True)
        reader.start()
        reader.join(self.startup_timeout_s)
        line = result[0] if result else ""
        if not line.startswith("PORT "):
            self.stop()
            raise LiveError(f"coordinator did not announce a port, got {line!r}")
        return int(line.split()[1])

    def _read_loop(self) -> None:
        assert self._sock is not None
        while True:
            try:
                frame = read_frame(self._sock)
            except (WireError, OSError):
                frame = None
            if frame is None:
                with self._cond:
                    self._eof = True
                    self._cond.notify_all()
                return
            if frame.is_heartbeat:
                continue
            try:
                doc = frame.json()
            except WireError:
                continue
            with self._cond:
                if doc.get("event") in _REPLIES:
                    self._replies.append(doc)
                else:
                    self._events.append(doc)
                self._cond.notify_all()

    def stop(self) -> None:
        if self._stopped:
            return
        self._stopped = True
        if self._link is not None:
            try:
                self._link.send_json({"cmd": "shutdown"})
                self._wait_reply(("bye",), 5.0, "shutdown acknowledgement")
            except (LiveError, OSError):
                pass
            self._link.close()
        if self._proc is not None:
            try:
                self._proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                self._proc.terminate()
                try:
                    self._proc.wait(timeout=2.0)
                except subprocess.TimeoutExpired:
                    self._proc.kill()
                    self._proc.wait()
            if self._proc.stdout is not None:
                self._proc.stdout.close()
        if self._config_path is not None:
            try:
                os.unlink(self._config_path)
            except OSError:
                pass

    def __enter__(self) -> "LiveHarness":
        if self._proc is None:
            self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- event access -----------------------------------------------------------

    def _wait_reply(self, names: tuple[str, ...], timeout: float, what: str) -> dict:
        # Commands are strictly sequential, so replies pair up by arrival
        # order. The cursor consumes each reply exactly once; without it a
        # second command would match the first command's stale reply.
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                while self._reply_cursor < len(self._replies):
                    doc = self._replies[self._reply_cursor]
                    self._reply_cursor += 1
                    if doc["event"] in names:
                        return doc
                if self._eof:
                    raise LiveError(f"coordinator exited while waiting for {what}")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise LiveError(f"timeout waiting for {what}")
                self._cond.wait(remaining)

    def wait_event(self, name: str, timeout: float = 10.0, **match) -> dict:
        deadline = time.monotonic() + timeout
        idx = 0
        with self._cond:
            while True:
                while idx < len(self._events):
                    doc = self._events[idx]
                    idx += 1
                    if doc.get("event") == name and all(
                            doc.get(k) == v for k, v in match.items()):
                        return doc
                if self._eof:
                    raise LiveError(f"coordinator exited while waiting for {name}")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise LiveError(f"timeout waiting for event {name}")
                self._cond.wait(remaining)

    def events(self, name: str | None = None) -> list[dict]:
        with self._cond:
            snapshot = list(self._events)
        if name is None:
            return snapshot
        return [doc for doc in snapshot if doc.get("event") == name]

    def count_between(self, name: str, start_us: int, end_us: int) -> int:
        return sum(
            1 for doc in self.events(name)
            if doc.get("ts_us") is not None and start_us <= doc["ts_us"] < end_us
        )

    def completions_between(self, start_us: int, end_us: int) -> int:
        return self.count_between("complete", start_us, end_us)

    def admissions_between(self, start_us: int, end_us: int) -> int:
        return self.count_between("admit", start_us, end_us)

    # -- commands ----------------------------------------------------------------

    def ping(self) -> None:
        self._require_link().send_json({"cmd": "ping"})
        self._wait_reply(("pong",), 10.0, "pong")

    def run_transition(self, strategy: str,
                       timing: TimingParams | None = None) -> TransitionReport:
        if strategy not in STRATEGY_NAMES:
            raise LiveError(f"unknown strategy {strategy!r}; "
                            f"expected one of {', '.join(STRATEGY_NAMES)}")
        timing = timing or DEFAULT_TIMING
        self._require_link().send_json({
            "cmd": "run_transition",
            "strategy": strategy,
            "timing": _timing_doc(timing),
        })
        budget = (timing.t_update + timing.t_initialisation + timing.t_exec) / 1000.0
        reply = self._wait_reply(("transition_done", "transition_error"),
                                 budget + 60.0, f"{strategy} transition")
        if reply["event"] == "transition_error":
            raise LiveError(f"{strategy} transition failed: "
                            f"{reply.get('message', 'unknown error')}")
        if not reply.get("moved", False):
            raise LiveError(
                f"{strategy} transition did not move the split; the planner kept "
                f"split {reply.get('from_split')} under the new conditions")
        self.transition_replies.append(reply)
        return TransitionReport(
            strategy=strategy,
            downtime_kind=str(reply["downtime_kind"]),
            window_start_us=int(reply["window_start_us"]),
            window_end_us=int(reply["window_end_us"]),
            frames_dropped=int(reply["frames_dropped"]),
            frames_degraded=int(reply["frames_degraded"]),
            memory=MemoryFootprint(
                initial_tenths=int(reply["memory_initial_tenths"]),
                additional_tenths=int(reply["memory_additional_tenths"]),
                transient=bool(reply["memory_transient"]),
            ),
        )

    def trigger_us(self) -> int:
        """Monotonic now, comparable with role timestamps on this host."""
        return mono_us()

    def kill_role(self, role: str, worker: int = 0) -> None:
        self._require_link().send_json({"cmd": "kill", "role": role, "worker": worker})
        self._wait_reply(("killed",), 10.0, f"kill of {role}")

    def wait_role_dead(self, timeout: float = 10.0) -> dict:
        return self.wait_event("role_dead", timeout=timeout)

    def _require_link(self) -> ControlLink:
        if self._link is None or self._stopped:
            raise LiveError("harness is not running")
        return self._link


def start_roles(config: LiveConfig | None = None) -> LiveHarness:
    """Spawn the coordinator and workers; returns a started harness."""
    return LiveHarness(config=config or LiveConfig()).start()


def measure_transition(harness: LiveHarness, strategy: str,
                       timing: TimingParams | None = None) -> TransitionReport:
    """Trigger one bandwidth flip under ``strategy`` and measure its window."""
    return harness.run_transition(strategy, timing)
