"""The four harness processes: device source, edge worker, cloud worker, coordinator.

Run one per process::

    python -m neukonfig.live.roles --role edge --coordinator-port 45123 --split 3

Every role reads the run configuration from the JSON file named by the
NEUKONFIG_CONFIG environment variable and dials the coordinator's control
port. Control channels carry wire frames: empty data frames are heartbeats
(every 0.5 s, two-second timeout), JSON-payload data frames are events and
commands, and the pause/resume/switch/plan kinds keep their meaning from the
wire format. Data paths are separate sockets: device to edge lanes
(unshaped), edge lanes to cloud (token-bucket shaped, this is the emulated
bottleneck link).

Timestamps are CLOCK_MONOTONIC microseconds, comparable across processes on
the same Linux host, which is the only deployment target.
"""

from __future__ import annotations

import argparse
import collections
import json
import os
import queue
import socket
import subprocess
import sys
import threading
import time

from ..pipeline import DEFAULT_CONTAINER_MB, DEFAULT_PIPELINE_MB
from ..planner import (
    NetworkConditions,
    PartitionPlan,
    estimate_latency,
    optimal_split,
    should_repartition,
    split_payload,
)
from ..profiles import DnnProfile, resolve_profile
from .shaper import ShapedChannel, ShaperConfig
from .wire import FrameKind, WireError, WireFrame, json_frame, read_frame, write_frame

ENV_CONFIG = "NEUKONFIG_CONFIG"
HEARTBEAT_S = 0.5
HEARTBEAT_TIMEOUT_S = 2.0
_LOCALHOST = "127.0.0.1"


class LiveProtocolError(RuntimeError):
    """Raised when a role violates the handshake or a wait times out."""


def mono_us() -> int:
    return time.monotonic_ns() // 1000


def _load_config() -> dict:
    path = os.environ.get(ENV_CONFIG)
    if not path:
        raise LiveProtocolError(f"{ENV_CONFIG} is not set")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _listen() -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((_LOCALHOST, 0))
    sock.listen(16)
    return sock


def _dial(port: int) -> socket.socket:
    sock = socket.create_connection((_LOCALHOST, port), timeout=10.0)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    sock.settimeout(None)
    return sock


class ControlLink:
    """A control connection: queued sender with heartbeats, blocking reader."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._out: queue.Queue[WireFrame] = queue.Queue()
        self._closed = False
        self._sender = threading.Thread(target=self._send_loop, daemon=True)
        self._sender.start()

    def _send_loop(self) -> None:
        while not self._closed:
            try:
                frame = self._out.get(timeout=HEARTBEAT_S)
            except queue.Empty:
                frame = WireFrame(FrameKind.DATA, send_ts_us=mono_us())
            try:
                write_frame(self._sock, frame)
            except OSError:
                return

    def send(self, frame: WireFrame) -> None:
        self._out.put(frame)

    def send_json(self, doc: dict, kind: FrameKind = FrameKind.DATA) -> None:
        self.send(json_frame(kind, doc, send_ts_us=mono_us()))

    def recv(self) -> WireFrame | None:
        try:
            return read_frame(self._sock)
        except WireError:
            return None

    def close(self) -> None:
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def _connect_coordinator(port: int, register: dict) -> ControlLink:
    link = ControlLink(_dial(port))
    link.send_json({"event": "register", **register})
    return link


# --------------------------------------------------------------------------
# device source
# --------------------------------------------------------------------------


def run_device(args: argparse.Namespace) -> int:
    cfg = _load_config()
    profile = resolve_profile(cfg["profile"])
    fps = float(cfg.get("fps", 10.0)) if args.fps is None else args.fps
    input_bytes = max(1, round(profile.input_size * 1e6 / 8))
    link = _connect_coordinator(args.coordinator_port, {"role": "device"})

    lanes: dict[int, socket.socket] = {}
    lock = threading.Lock()
    active: list[int | None] = [None]
    stop = threading.Event()
    started = False

    def generator() -> None:
        period = 1.0 / fps
        t0 = time.monotonic()
        k = 0
        while not stop.is_set():
            delay = t0 + k * period - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            if stop.is_set():
                return
            with lock:
                target = active[0]
                sock = lanes.get(target) if target is not None else None
            if sock is not None:
                frame = WireFrame(
                    FrameKind.DATA, seq=k, send_ts_us=mono_us(),
                    payload=b"\x00" * input_bytes,
                )
                try:
                    write_frame(sock, frame)
                except OSError:
                    pass  # lane retired mid-send; the dispatcher moves on
            k += 1

    while True:
        frame = link.recv()
        if frame is None:
            break
        if frame.is_heartbeat:
            continue
        if frame.kind is FrameKind.CONTROL_SWITCH:
            doc = frame.json()
            t_switch_ms = float(doc.get("t_switch_ms", 0.0))
            if t_switch_ms > 0:
                time.sleep(t_switch_ms / 1000.0)
            with lock:
                active[0] = int(doc["lane"])
            link.send_json({"event": "switched", "lane": int(doc["lane"]), "ts_us": mono_us()})
            continue
        doc = frame.json()
        cmd = doc.get("cmd")
        if cmd == "wire":
            for lane_id, port in doc["lanes"].items():
                lanes[int(lane_id)] = _dial(int(port))
            with lock:
                active[0] = int(doc["active"])
            if fps > 0 and not started:
                started = True
                threading.Thread(target=generator, daemon=True).start()
            link.send_json({"event": "wired", "role": "device"})
        elif cmd == "connect_lane":
            lanes[int(doc["lane"])] = _dial(int(doc["port"]))
            link.send_json({"event": "lane_connected", "lane": int(doc["lane"])})
        elif cmd == "disconnect_lane":
            with lock:
                sock = lanes.pop(int(doc["lane"]), None)
            if sock is not None:
                sock.close()
            link.send_json({"event": "lane_dropped", "lane": int(doc["lane"])})
        elif cmd == "shutdown":
            break
    stop.set()
    link.close()
    return 0


# --------------------------------------------------------------------------
# edge worker
# --------------------------------------------------------------------------


class _Lane:
    """One pipeline lane: a device-facing listener, a bounded queue, a worker."""

    def __init__(self, edge: "_EdgeWorker", lane_id: int, split: int):
        self.edge = edge
        self.id = lane_id
        self.split = split
        self.listener = _listen()
        self.port = self.listener.getsockname()[1]
        self.queue: collections.deque[int] = collections.deque()
        self.cond = threading.Condition()
        self.busy = False
        self.paused = False
        self.closing = False
        self.device_conn: socket.socket | None = None
        self.cloud_sock: socket.socket | None = None
        self.channel: ShapedChannel | None = None
        threading.Thread(target=self._receive_loop, daemon=True).start()
        threading.Thread(target=self._work_loop, daemon=True).start()

    def connect_cloud(self, host: str, port: int, shaper: ShaperConfig) -> None:
        self.cloud_sock = socket.create_connection((host, port), timeout=10.0)
        self.cloud_sock.settimeout(None)
        self.channel = ShapedChannel(self.cloud_sock, shaper)
        self._announce_plan()

    def _announce_plan(self) -> None:
        assert self.channel is not None
        self.channel.send_raw(
            json_frame(FrameKind.CONTROL_PLAN, {"split": self.split}, send_ts_us=mono_us())
        )

    def set_plan(self, split: int) -> None:
        with self.cond:
            self.split = split
        if self.channel is not None:
            self._announce_plan()

    def pause(self) -> None:
        with self.cond:
            self.paused = True

    def resume(self) -> None:
        with self.cond:
            self.paused = False
            self.cond.notify_all()

    def set_rate(self, rate_mbps: float) -> None:
        if self.channel is not None:
            self.channel.set_rate(rate_mbps)

    def close(self) -> None:
        with self.cond:
            self.closing = True
            self.cond.notify_all()
        for sock in (self.listener, self.device_conn, self.cloud_sock):
            if sock is not None:
                try:
                    sock.close()
                except OSError:
                    pass

    def _receive_loop(self) -> None:
        try:
            conn, _ = self.listener.accept()
        except OSError:
            return
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.device_conn = conn
        while True:
            try:
                frame = read_frame(conn)
            except WireError:
                return
            if frame is None:
                return
            if frame.kind is not FrameKind.DATA or not frame.payload:
                continue
            with self.cond:
                if self.closing:
                    return
                idle = not self.busy and not self.paused and not self.queue
                if idle or len(self.queue) < self.edge.queue_capacity:
                    self.queue.append(frame.seq)
                    self.cond.notify_all()
                else:
                    self.edge.emit("drop", lane=self.id, seq=frame.seq)

    def _work_loop(self) -> None:
        while True:
            with self.cond:
                while not self.queue or self.paused:
                    if self.closing:
                        return
                    self.cond.wait()
                if self.closing:
                    return
                seq = self.queue.popleft()
                split = self.split
                self.busy = True
            self.edge.emit("admit", lane=self.id, seq=seq)
            time.sleep(self.edge.edge_time_s(split))
            payload = b"\x00" * self.edge.payload_bytes(split)
            try:
                assert self.channel is not None and self.cloud_sock is not None
                self.channel.send(WireFrame(FrameKind.DATA, seq=seq, payload=payload))
                ack = read_frame(self.cloud_sock)
            except (OSError, WireError, AssertionError):
                ack = None
            if ack is None:
                if not self.closing:
                    self.edge.emit("error", lane=self.id, message="cloud connection lost")
                return
            with self.cond:
                while self.paused:  # hold the finished result until resume
                    self.cond.wait()
                done_ts = mono_us()
                self.busy = False
                self.cond.notify_all()
            self.edge.emit("complete", lane=self.id, seq=seq, ts_us=done_ts)


class _EdgeWorker:
    def __init__(self, cfg: dict, profile: DnnProfile, args: argparse.Namespace):
        self.profile = profile
        self.worker_id = args.worker_id
        self.queue_capacity = int(cfg.get("queue_capacity", 1))
        self.link: ControlLink | None = None
        self.lanes: dict[int, _Lane] = {}
        self.cloud_addr: tuple[str, int] | None = None
        self.shaper = ShaperConfig(
            rate_mbps=args.rate if args.rate is not None else float(cfg["bandwidth_mbps"]),
            burst_mb=args.burst if args.burst is not None else float(cfg.get("burst_mb", 1.0)),
            added_latency_ms=(
                args.latency if args.latency is not None else float(cfg.get("latency_ms", 0.0))
            ),
        )

    def edge_time_s(self, split: int) -> float:
        return sum(u.edge_time for u in self.profile.units[:split]) / 1000.0

    def payload_bytes(self, split: int) -> int:
        return max(1, round(split_payload(self.profile, split) * 1e6 / 8))

    def emit(self, event: str, **fields) -> None:
        if self.link is not None:
            doc = {"event": event, "worker": self.worker_id, "ts_us": mono_us()}
            doc.update(fields)
            self.link.send_json(doc)


def run_edge(args: argparse.Namespace) -> int:
    cfg = _load_config()
    profile = resolve_profile(cfg["profile"])
    if args.init_delay_ms > 0:  # models container build/initialisation
        time.sleep(args.init_delay_ms / 1000.0)
    edge = _EdgeWorker(cfg, profile, args)
    split = args.split
    if split is None:
        split = optimal_split(
            profile,
            NetworkConditions(
                bandwidth=float(cfg["bandwidth_mbps"]),
                latency=float(cfg.get("latency_ms", 0.0)),
            ),
        ).split
    edge.lanes[0] = _Lane(edge, 0, split)
    if args.standby:
        edge.lanes[1] = _Lane(edge, 1, split)
    next_lane = max(edge.lanes) + 1

    link = _connect_coordinator(
        args.coordinator_port,
        {
            "role": "edge",
            "worker": args.worker_id,
            "lanes": {str(l.id): l.port for l in edge.lanes.values()},
        },
    )
    edge.link = link

    while True:
        frame = link.recv()
        if frame is None:
            break
        if frame.is_heartbeat:
            continue
        doc = frame.json()
        if frame.kind is FrameKind.CONTROL_PAUSE:
            edge.lanes[int(doc["lane"])].pause()
            edge.emit("paused", lane=int(doc["lane"]))
            continue
        if frame.kind is FrameKind.CONTROL_RESUME:
            edge.lanes[int(doc["lane"])].resume()
            edge.emit("resumed", lane=int(doc["lane"]))
            continue
        if frame.kind is FrameKind.CONTROL_PLAN:
            edge.lanes[int(doc["lane"])].set_plan(int(doc["split"]))
            edge.emit("plan_set", lane=int(doc["lane"]), split=int(doc["split"]))
            continue
        cmd = doc.get("cmd")
        if cmd == "wire":
            edge.cloud_addr = (str(doc["cloud_host"]), int(doc["cloud_port"]))
            for lane in edge.lanes.values():
                lane.connect_cloud(*edge.cloud_addr, edge.shaper)
            edge.emit("wired", role="edge")
        elif cmd == "set_rate":
            rate = float(doc["mbps"])
            edge.shaper = ShaperConfig(
                rate_mbps=rate,
                burst_mb=edge.shaper.burst_mb,
                added_latency_ms=edge.shaper.added_latency_ms,
            )
            for lane in edge.lanes.values():
                lane.set_rate(rate)
            edge.emit("rate_set", mbps=rate)
        elif cmd == "open_lane":
            lane_id = int(doc.get("lane", next_lane))
            next_lane = max(next_lane, lane_id + 1)

            def _open(lane_id=lane_id, doc=doc):
                delay = float(doc.get("exec_delay_ms", 0.0))
                if delay > 0:  # models starting another pipeline process
                    time.sleep(delay / 1000.0)
                lane = _Lane(edge, lane_id, int(doc["split"]))
                assert edge.cloud_addr is not None
                lane.connect_cloud(*edge.cloud_addr, edge.shaper)
                edge.lanes[lane_id] = lane
                edge.emit("lane_open", lane=lane_id, port=lane.port)

            threading.Thread(target=_open, daemon=True).start()
        elif cmd == "close_lane":
            lane = edge.lanes.pop(int(doc["lane"]), None)
            if lane is not None:
                lane.close()
            edge.emit("lane_closed", lane=int(doc["lane"]))
        elif cmd == "shutdown":
            break
    for lane in edge.lanes.values():
        lane.close()
    link.close()
    return 0


# --------------------------------------------------------------------------
# cloud worker
# --------------------------------------------------------------------------


def run_cloud(args: argparse.Namespace) -> int:
    cfg = _load_config()
    profile = resolve_profile(cfg["profile"])
    listener = _listen()
    port = listener.getsockname()[1]
    link = _connect_coordinator(args.coordinator_port, {"role": "cloud", "port": port})

    def cloud_time_s(split: int) -> float:
        return sum(u.cloud_time for u in profile.units[split:]) / 1000.0

    def serve(conn: socket.socket) -> None:
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        split: int | None = None
        while True:
            try:
                frame = read_frame(conn)
            except WireError:
                return
            if frame is None:
                return
            if frame.kind is FrameKind.CONTROL_PLAN:
                split = int(frame.json()["split"])
            elif frame.kind is FrameKind.DATA and frame.payload:
                if split is None:
                    return  # protocol requires a plan before data
                time.sleep(cloud_time_s(split))
                try:
                    write_frame(conn, WireFrame(FrameKind.DATA, seq=frame.seq,
                                                send_ts_us=mono_us()))
                except OSError:
                    return

    def accept_loop() -> None:
        while True:
            try:
                conn, _ = listener.accept()
            except OSError:
                return
            threading.Thread(target=serve, args=(conn,), daemon=True).start()

    threading.Thread(target=accept_loop, daemon=True).start()

    while True:
        frame = link.recv()
        if frame is None:
            break
        if frame.is_heartbeat:
            continue
        if frame.json().get("cmd") == "shutdown":
            break
    listener.close()
    link.close()
    return 0


# --------------------------------------------------------------------------
# coordinator
# --------------------------------------------------------------------------


def _rid(worker: int, lane: int) -> int:
    """Flat dispatcher id for (worker, lane); readable in event logs."""
    return worker * 1000 + lane


class _Coordinator:
    _REPLY_TIMEOUT_S = 30.0

    def __init__(self, args: argparse.Namespace):
        self.cfg = _load_config()
        self.profile = resolve_profile(self.cfg["profile"])
        self.base_rate = float(self.cfg["bandwidth_mbps"])
        self.alt_rate = float(self.cfg.get("alt_bandwidth_mbps", self.base_rate))
        self.latency = float(self.cfg.get("latency_ms", 0.0))
        self.standby_mode = str(self.cfg.get("standby_mode", "lane"))
        self.container_tenths = round(float(self.cfg.get("container_mb", DEFAULT_CONTAINER_MB)) * 10)
        self.pipeline_tenths = round(float(self.cfg.get("pipeline_mb", DEFAULT_PIPELINE_MB)) * 10)
        self.rate = self.base_rate
        self.split0 = optimal_split(self.profile, self._conditions()).split

        self.listener = _listen()
        self.port = self.listener.getsockname()[1]
        self.events: list[dict] = []
        self.claimed: set[int] = set()
        self.ev_cond = threading.Condition()
        self.workers: dict[tuple[str, int], dict] = {}
        self.retiring: set[tuple[str, int]] = set()
        self.procs: dict[tuple[str, int], subprocess.Popen] = {}
        self.parent: ControlLink | None = None
        self.dead: tuple[str, int] | None = None
        self.stopping = False

        self.active = (0, 0, self.split0)  # (edge worker, lane, split)
        self.standby: tuple[int, int, int] | None = None
        self.next_worker = 1
        self.next_lane: dict[int, int] = {}

    def _conditions(self) -> NetworkConditions:
        return NetworkConditions(bandwidth=self.rate, latency=self.latency)

    # -- event plumbing ------------------------------------------------------

    def note(self, doc: dict) -> None:
        with self.ev_cond:
            self.events.append(doc)
            self.ev_cond.notify_all()
        parent = self.parent
        if parent is not None:
            parent.send_json(doc)

    def wait_for(self, pred, what: str, timeout: float | None = None):
        # Each wait claims the event it matched so a later wait for the same
        # ack (say, a second transition's pause acknowledgement) cannot be
        # satisfied by this one. Unmatched history stays up for grabs: an ack
        # that lands before its wait starts must still be found.
        deadline = time.monotonic() + (timeout or self._REPLY_TIMEOUT_S)
        idx = 0
        with self.ev_cond:
            while True:
                while idx < len(self.events):
                    doc = self.events[idx]
                    if idx not in self.claimed and pred(doc):
                        self.claimed.add(idx)
                        return doc
                    idx += 1
                if self.dead is not None:
                    role, wid = self.dead
                    raise LiveProtocolError(f"{role} worker {wid} died while waiting for {what}")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise LiveProtocolError(f"timeout waiting for {what}")
                self.ev_cond.wait(remaining)

    def _wait_event(self, name: str, what: str, timeout: float | None = None, **match):
        def pred(doc):
            return doc.get("event") == name and all(doc.get(k) == v for k, v in match.items())

        return self.wait_for(pred, what, timeout)

    # -- workers ---------------------------------------------------------------

    def spawn(self, role: str, worker_id: int, extra: list[str]) -> None:
        argv = [
            sys.executable, "-m", "neukonfig.live.roles",
            "--role", role,
            "--coordinator-port", str(self.port),
            "--worker-id", str(worker_id),
            *extra,
        ]
        proc = subprocess.Popen(argv, stdout=subprocess.DEVNULL)
        self.procs[(role, worker_id)] = proc

    def spawn_edge(self, worker_id: int, split: int, standby: bool,
                   init_delay_ms: float = 0.0) -> None:
        extra = ["--split", str(split), "--rate", str(self.rate)]
        if standby:
            extra.append("--standby")
        if init_delay_ms > 0:
            extra.extend(["--init-delay-ms", str(init_delay_ms)])
        self.spawn("edge", worker_id, extra)
        self.next_lane[worker_id] = 2 if standby else 1

    def link_of(self, role: str, worker_id: int = 0) -> ControlLink:
        entry = self.workers.get((role, worker_id))
        if entry is None:
            raise LiveProtocolError(f"no registered {role} worker {worker_id}")
        return entry["link"]

    def edge_keys(self) -> list[tuple[str, int]]:
        return [k for k in self.workers if k[0] == "edge" and k not in self.retiring]

    def _serve_worker(self, conn: socket.socket, reg: dict) -> None:
        role = str(reg["role"])
        wid = int(reg.get("worker", 0))
        key = (role, wid)
        link = ControlLink(conn)
        self.workers[key] = {"link": link, "meta": reg, "last": time.monotonic()}
        self.note({**reg, "worker": wid})
        while True:
            try:
                frame = read_frame(conn)
            except WireError:
                frame = None
            if frame is None:
                self._worker_gone(key)
                return
            self.workers[key]["last"] = time.monotonic()
            if frame.is_heartbeat:
                continue
            try:
                doc = frame.json()
            except WireError:
                continue
            doc.setdefault("role", role)
            doc.setdefault("worker", wid)
            self.note(doc)

    def _worker_gone(self, key: tuple[str, int]) -> None:
        if self.stopping or key in self.retiring:
            self.workers.pop(key, None)
            return
        if self.dead is None:
            self.dead = key
            self.note({"event": "role_dead", "role": key[0], "worker": key[1]})
            with self.ev_cond:
                self.ev_cond.notify_all()

    def _watchdog(self) -> None:
        while not self.stopping:
            time.sleep(HEARTBEAT_S / 2)
            now = time.monotonic()
            for key, entry in list(self.workers.items()):
                if key in self.retiring:
                    continue
                if now - entry["last"] > HEARTBEAT_TIMEOUT_S:
                    self._worker_gone(key)

    # -- startup ------------------------------------------------------------------

    def startup(self) -> None:
        self.spawn("device", 0, [])
        self.spawn("cloud", 0, [])
        self.spawn_edge(0, self.split0, standby=(self.standby_mode == "lane"))
        if self.standby_mode == "worker":
            self.spawn_edge(1, self.split0, standby=False)
            self.next_worker = 2
        for role, wid in (("device", 0), ("cloud", 0), ("edge", 0)):
            self._wait_event("register", f"{role} registration", timeout=15.0,
                             role=role, worker=wid)
        if self.standby_mode == "worker":
            self._wait_event("register", "standby edge registration", timeout=15.0,
                             role="edge", worker=1)
            self.standby = (1, 0, self.split0)
        elif self.standby_mode == "lane":
            self.standby = (0, 1, self.split0)

        cloud_port = int(self.workers[("cloud", 0)]["meta"]["port"])
        self.cloud_port = cloud_port
        for key in self.edge_keys():
            self._wire_edge(key[1])
        lanes = {}
        for key in self.edge_keys():
            meta = self.workers[key]["meta"]
            for lane_id, port in meta["lanes"].items():
                lanes[str(_rid(key[1], int(lane_id)))] = int(port)
        device = self.link_of("device")
        device.send_json({
            "cmd": "wire", "lanes": lanes,
            "active": _rid(self.active[0], self.active[1]),
        })
        self._wait_event("wired", "device wiring", role="device")

    def _wire_edge(self, worker_id: int) -> None:
        self.link_of("edge", worker_id).send_json({
            "cmd": "wire",
            "cloud_host": _LOCALHOST,
            "cloud_port": self.cloud_port,
        })
        self._wait_event("wired", f"edge worker {worker_id} wiring",
                         role="edge", worker=worker_id)

    # -- measurement helpers ----------------------------------------------------

    def _scan(self, name: str, start_us: int, end_us: int,
              worker: int | None = None, lane: int | None = None) -> list[dict]:
        with self.ev_cond:
            snapshot = list(self.events)
        out = []
        for doc in snapshot:
            if doc.get("event") != name:
                continue
            ts = doc.get("ts_us")
            if ts is None or not start_us <= ts < end_us:
                continue
            if worker is not None and doc.get("worker") != worker:
                continue
            if lane is not None and doc.get("lane") != lane:
                continue
            out.append(doc)
        return out

    def _memory(self, extra_container: bool, transient: bool) -> dict:
        additional = self.container_tenths if extra_container else self.pipeline_tenths
        return {
            "memory_initial_tenths": self.container_tenths,
            "memory_additional_tenths": additional,
            "memory_transient": transient,
        }

    # -- transitions -----------------------------------------------------------------

    def run_transition(self, strategy: str, timing: dict) -> dict:
        t_update_ms = float(timing.get("t_update_ms", 6000.0))
        t_switch_ms = float(timing.get("t_switch_ms", 0.98))
        t_init_ms = float(timing.get("t_initialisation_ms", 1900.0))
        t_exec_ms = float(timing.get("t_exec_ms", 600.0))
        t_plan_update_ms = float(timing.get("t_plan_update_ms", 0.0))

        trigger = mono_us()
        self.rate = self.alt_rate if self.rate == self.base_rate else self.base_rate
        for key in self.edge_keys():
            self.link_of(*key).send_json({"cmd": "set_rate", "mbps": self.rate})
            self._wait_event("rate_set", f"rate change on edge {key[1]}",
                             role="edge", worker=key[1])

        aw, al, asplit = self.active
        old_cond = NetworkConditions(
            bandwidth=self.base_rate if self.rate == self.alt_rate else self.alt_rate,
            latency=self.latency,
        )
        current = PartitionPlan(
            profile_name=self.profile.name,
            split=asplit,
            breakdown=estimate_latency(self.profile, asplit, old_cond),
            conditions=old_cond,
        )
        move, plan = should_repartition(current, self.profile, self._conditions())
        if not move:
            return {"moved": False, "strategy": strategy, "from_split": asplit,
                    "to_split": asplit}
        split2 = plan.split

        if strategy == "pause_resume":
            result = self._pause_resume(trigger, t_update_ms, split2)
        elif strategy in ("dyn_A", "dyn_A_case1", "dyn_A_case2"):
            result = self._dyn_a(strategy, trigger, t_plan_update_ms, t_switch_ms, split2)
        elif strategy == "dyn_B_case1":
            result = self._dyn_b1(trigger, t_init_ms, t_switch_ms, split2)
        elif strategy == "dyn_B_case2":
            result = self._dyn_b2(trigger, t_exec_ms, t_switch_ms, split2)
        else:
            raise LiveProtocolError(f"unknown live strategy {strategy!r}")

        result.update({"moved": True, "strategy": strategy,
                       "from_split": asplit, "to_split": split2,
                       "trigger_us": trigger})
        return result

    def _pause_resume(self, trigger: int, t_update_ms: float, split2: int) -> dict:
        aw, al, _ = self.active
        link = self.link_of("edge", aw)
        link.send(json_frame(FrameKind.CONTROL_PAUSE, {"lane": al}))
        paused = self._wait_event("paused", "pause ack", role="edge", worker=aw, lane=al)
        time.sleep(t_update_ms / 1000.0)
        link.send(json_frame(FrameKind.CONTROL_PLAN, {"lane": al, "split": split2}))
        self._wait_event("plan_set", "plan update ack", role="edge", worker=aw, lane=al)
        link.send(json_frame(FrameKind.CONTROL_RESUME, {"lane": al}))
        resumed = self._wait_event("resumed", "resume ack", role="edge", worker=aw, lane=al)
        resume_ts = resumed["ts_us"]
        if float(self.cfg.get("fps", 10.0)) > 0:
            self._wait_event_after("admit", resume_ts, aw, al, timeout=10.0)
        admits = sorted(
            doc["ts_us"] for doc in self._scan(
                "admit", trigger - 3_000_000, mono_us(), worker=aw, lane=al)
        )
        if len(admits) >= 2:
            gaps = [(b - a, a, b) for a, b in zip(admits, admits[1:])]
            _, gap_start, gap_end = max(gaps)
        else:
            gap_start, gap_end = paused["ts_us"], resume_ts
        self.active = (aw, al, split2)
        return {
            "downtime_kind": "full_outage",
            "window_start_us": gap_start,
            "window_end_us": gap_end,
            "frames_dropped": len(self._scan("drop", gap_start, gap_end,
                                             worker=aw, lane=al)),
            "frames_degraded": 0,
            **self._memory(extra_container=False, transient=False),
        }

    def _wait_event_after(self, name: str, after_us: int, worker: int, lane: int,
                          timeout: float = 5.0) -> dict:
        def pred(doc):
            return (doc.get("event") == name and doc.get("worker") == worker
                    and doc.get("lane") == lane and doc.get("ts_us", 0) > after_us)

        return self.wait_for(pred, f"{name} after resume", timeout)

    def _switch_device(self, rid: int, t_switch_ms: float) -> int:
        device = self.link_of("device")
        device.send(json_frame(FrameKind.CONTROL_SWITCH,
                               {"lane": rid, "t_switch_ms": t_switch_ms}))
        switched = self._wait_event("switched", "dispatcher switch", lane=rid)
        return switched["ts_us"]

    def _degraded_result(self, trigger: int, end: int, old_worker: int,
                         old_lane: int, extra_container: bool, transient: bool) -> dict:
        return {
            "downtime_kind": "degraded",
            "window_start_us": trigger,
            "window_end_us": end,
            "frames_dropped": len(self._scan("drop", trigger, end)),
            "frames_degraded": len(self._scan("complete", trigger, end,
                                              worker=old_worker, lane=old_lane)),
            **self._memory(extra_container=extra_container, transient=transient),
        }

    def _dyn_a(self, strategy: str, trigger: int, t_plan_update_ms: float,
               t_switch_ms: float, split2: int) -> dict:
        if self.standby is None:
            raise LiveProtocolError("dynamic switch A needs a standby pipeline")
        if strategy == "dyn_A_case1" and self.standby_mode != "worker":
            raise LiveProtocolError("dyn_A_case1 needs standby_mode='worker'")
        if strategy == "dyn_A_case2" and self.standby_mode != "lane":
            raise LiveProtocolError("dyn_A_case2 needs standby_mode='lane'")
        aw, al, asplit = self.active
        sw, sl, _ = self.standby
        if t_plan_update_ms > 0:
            time.sleep(t_plan_update_ms / 1000.0)
        self.link_of("edge", sw).send(
            json_frame(FrameKind.CONTROL_PLAN, {"lane": sl, "split": split2}))
        self._wait_event("plan_set", "standby plan update", role="edge",
                         worker=sw, lane=sl)
        end = self._switch_device(_rid(sw, sl), t_switch_ms)
        self.active = (sw, sl, split2)
        self.standby = (aw, al, asplit)
        return self._degraded_result(trigger, end, aw, al,
                                     extra_container=(self.standby_mode == "worker"),
                                     transient=False)

    def _dyn_b1(self, trigger: int, t_init_ms: float, t_switch_ms: float,
                split2: int) -> dict:
        aw, al, _ = self.active
        wid = self.next_worker
        self.next_worker += 1
        self.spawn_edge(wid, split2, standby=False, init_delay_ms=t_init_ms)
        self._wait_event("register", f"edge worker {wid} registration",
                         timeout=t_init_ms / 1000.0 + 25.0, role="edge", worker=wid)
        self._wire_edge(wid)
        port = int(self.workers[("edge", wid)]["meta"]["lanes"]["0"])
        device = self.link_of("device")
        device.send_json({"cmd": "connect_lane", "lane": _rid(wid, 0), "port": port})
        self._wait_event("lane_connected", "device lane connect", lane=_rid(wid, 0))
        end = self._switch_device(_rid(wid, 0), t_switch_ms)
        result = self._degraded_result(trigger, end, aw, al,
                                       extra_container=True, transient=True)
        # the old containers drain briefly, then are terminated outright
        time.sleep(0.25)
        old_key = ("edge", aw)
        self.retiring.add(old_key)
        device.send_json({"cmd": "disconnect_lane", "lane": _rid(aw, al)})
        self._wait_event("lane_dropped", "device lane drop", lane=_rid(aw, al))
        try:
            self.link_of("edge", aw).send_json({"cmd": "shutdown"})
        except LiveProtocolError:
            pass
        if self.standby is not None and self.standby[0] == aw:
            self.standby = None
        self.active = (wid, 0, split2)
        return result

    def _dyn_b2(self, trigger: int, t_exec_ms: float, t_switch_ms: float,
                split2: int) -> dict:
        aw, al, _ = self.active
        lane_id = self.next_lane.get(aw, 1)
        self.next_lane[aw] = lane_id + 1
        self.link_of("edge", aw).send_json({
            "cmd": "open_lane", "lane": lane_id, "split": split2,
            "exec_delay_ms": t_exec_ms,
        })
        opened = self._wait_event("lane_open", "new pipeline lane",
                                  timeout=t_exec_ms / 1000.0 + 20.0,
                                  role="edge", worker=aw, lane=lane_id)
        device = self.link_of("device")
        device.send_json({"cmd": "connect_lane", "lane": _rid(aw, lane_id),
                          "port": int(opened["port"])})
        self._wait_event("lane_connected", "device lane connect", lane=_rid(aw, lane_id))
        end = self._switch_device(_rid(aw, lane_id), t_switch_ms)
        result = self._degraded_result(trigger, end, aw, al,
                                       extra_container=False, transient=False)
        # the old pipeline process exits; its containers stay up
        time.sleep(0.25)
        device.send_json({"cmd": "disconnect_lane", "lane": _rid(aw, al)})
        self._wait_event("lane_dropped", "device lane drop", lane=_rid(aw, al))
        self.link_of("edge", aw).send_json({"cmd": "close_lane", "lane": al})
        self._wait_event("lane_closed", "old lane close", role="edge",
                         worker=aw, lane=al)
        self.active = (aw, lane_id, split2)
        return result

    # -- parent protocol ---------------------------------------------------------

    def serve_parent(self, conn: socket.socket) -> None:
        link = ControlLink(conn)
        self.parent = link
        try:
            self.startup()
        except Exception as exc:  # surfaces bind/handshake problems to the caller
            link.send_json({"event": "startup_error", "message": str(exc)})
            self.shutdown()
            return
        link.send_json({"event": "ready", "split": self.split0,
                        "rate_mbps": self.rate})
        while True:
            try:
                frame = read_frame(conn)
            except WireError:
                frame = None
            if frame is None:
                break  # the parent vanished; tear the run down
            if frame.is_heartbeat:
                continue
            doc = frame.json()
            cmd = doc.get("cmd")
            if cmd == "run_transition":
                try:
                    result = self.run_transition(
                        str(doc["strategy"]), dict(doc.get("timing", {})))
                    link.send_json({"event": "transition_done", **result})
                except Exception as exc:
                    link.send_json({"event": "transition_error", "message": str(exc)})
            elif cmd == "kill":
                key = (str(doc["role"]), int(doc.get("worker", 0)))
                proc = self.procs.get(key)
                if proc is not None:
                    proc.terminate()
                link.send_json({"event": "killed", "role": key[0]})
            elif cmd == "ping":
                link.send_json({"event": "pong", "ts_us": mono_us()})
            elif cmd == "shutdown":
                link.send_json({"event": "bye"})
                break
        self.shutdown()

    def shutdown(self) -> None:
        if self.stopping:
            return
        self.stopping = True
        for key, entry in list(self.workers.items()):
            try:
                entry["link"].send_json({"cmd": "shutdown"})
            except Exception:
                pass
        deadline = time.monotonic() + 2.0
        for proc in self.procs.values():
            timeout = max(0.1, deadline - time.monotonic())
            try:
                proc.wait(timeout=timeout)
            except subprocess.TimeoutExpired:
                proc.terminate()
                try:
                    proc.wait(timeout=1.0)
                except subprocess.TimeoutExpired:
                    proc.kill()
        try:
            self.listener.close()
        except OSError:
            pass

    def run(self) -> int:
        print(f"PORT {self.port}", flush=True)
        threading.Thread(target=self._watchdog, daemon=True).start()
        while not self.stopping:
            try:
                conn, _ = self.listener.accept()
            except OSError:
                break
            threading.Thread(target=self._serve_conn, args=(conn,), daemon=True).start()
        return 0

    def _serve_conn(self, conn: socket.socket) -> None:
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            frame = read_frame(conn)
        except WireError:
            conn.close()
            return
        if frame is None or frame.is_heartbeat:
            conn.close()
            return
        try:
            doc = frame.json()
        except WireError:
            conn.close()
            return
        if doc.get("event") != "register":
            conn.close()
            return
        if doc.get("role") == "parent":
            self.serve_parent(conn)
            # parent loop ended: stop accepting and let run() unwind
            self.stopping = True
            try:
                self.listener.close()
            except OSError:
                pass
        else:
            self._serve_worker(conn, doc)


def run_coordinator(args: argparse.Namespace) -> int:
    return _Coordinator(args).run()


# --------------------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="neukonfig.live.roles",
        description="Run one harness role (configuration comes from "
                    f"the file named by ${ENV_CONFIG}).",
    )
    parser.add_argument("--role", required=True,
                        choices=["device", "edge", "cloud", "coordinator"])
    parser.add_argument("--coordinator-port", type=int, default=0,
                        help="control port of the coordinator (worker roles)")
    parser.add_argument("--worker-id", type=int, default=0)
    parser.add_argument("--fps", type=float, default=None,
                        help="device frame rate override")
    parser.add_argument("--split", type=int, default=None,
                        help="edge: initial partition point")
    parser.add_argument("--rate", type=float, default=None,
                        help="edge: initial shaper rate, Mbps")
    parser.add_argument("--burst", type=float, default=None,
                        help="edge: shaper burst, Mb")
    parser.add_argument("--latency", type=float, default=None,
                        help="edge: added one-way latency, ms")
    parser.add_argument("--standby", action="store_true",
                        help="edge: also open a standby lane")
    parser.add_argument("--init-delay-ms", type=float, default=0.0,
                        help="edge: sleep before registering (container spin-up)")
    args = parser.parse_args(argv)

    runners = {
        "device": run_device,
        "edge": run_edge,
        "cloud": run_cloud,
        "coordinator": run_coordinator,
    }
    if args.role != "coordinator" and args.coordinator_port <= 0:
        parser.error(f"--coordinator-port is required for role {args.role}")
    return runners[args.role](args)


if __name__ == "__main__":
    sys.exit(main())
