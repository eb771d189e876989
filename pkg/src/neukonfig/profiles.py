"""DNN layer profiles: ingestion, parallel-block collapsing, compute scaling.

Two on-disk formats are understood, both JSON:

* layer-list: a header (``name``, ``input_size_mb``) plus one record per layer
  with ``id``, ``label``, ``edge_time_ms``, ``cloud_time_ms``,
  ``output_size_mb``. Layer ids must be consecutive integers.
* layer-graph: the same node records plus an ``edges`` list of
  ``[from_id, to_id]`` pairs describing a connected DAG with a unique source
  and a unique sink.

A graph is reduced to a linear sequence of compute units by collapsing every
maximal single-entry/single-exit parallel region into one unit, after which
splits are only taken between units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable

_BUNDLED_DIR = "data"
BUNDLED_PROFILES = ("vgg19-synthetic", "mobilenetv2-synthetic", "edgecam-lite")


class ProfileError(ValueError):
    """Raised for malformed profile files or invalid profile data."""


class RegionError(ProfileError):
    """Raised when a graph's parallel regions are not single-entry/single-exit."""

    def __init__(self, message: str, offending: Iterable[int] = ()):
        super().__init__(message)
        self.offending = tuple(offending)


@dataclass(frozen=True)
class ComputeUnit:
    """One splittable unit of work: a single layer or a collapsed block."""

    id: int
    label: str
    edge_time: float  # ms on the edge at full CPU availability
    cloud_time: float  # ms on the cloud
    output_size: float  # Mb leaving this unit

    def __post_init__(self):
        if self.edge_time <= 0 or self.cloud_time <= 0:
            raise ProfileError(
                f"unit {self.id} ({self.label}): compute times must be > 0"
            )
        if self.output_size < 0:
            raise ProfileError(
                f"unit {self.id} ({self.label}): output_size must be >= 0"
            )


@dataclass(frozen=True)
class DnnProfile:
    """Ordered compute units plus the input payload feeding unit 1.

    ``block_map`` records, per unit, the inclusive range of original layer
    ids it covers; single layers get a range of length one. Ranges tile the
    layer-id space in order.
    """

    name: str
    input_size: float  # Mb entering the first unit
    units: tuple[ComputeUnit, ...]
    block_map: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.units:
            raise ProfileError(f"profile {self.name!r} has no units")
        if self.input_size <= 0:
            raise ProfileError(f"profile {self.name!r}: input_size must be > 0")
        if len(self.block_map) != len(self.units):
            raise ProfileError(
                f"profile {self.name!r}: block_map and units lengths differ"
            )
        prev_hi = None
        for lo, hi in self.block_map:
            if lo > hi:
                raise ProfileError(
                    f"profile {self.name!r}: inverted block range ({lo}, {hi})"
                )
            if prev_hi is not None and lo != prev_hi + 1:
                raise ProfileError(
                    f"profile {self.name!r}: block ranges are not contiguous "
                    f"at ({lo}, {hi})"
                )
            prev_hi = hi

    def __len__(self) -> int:
        return len(self.units)


@dataclass
class LayerNode:
    """A single layer in a layer graph."""

    id: int
    label: str
    edge_time: float
    cloud_time: float
    output_size: float


@dataclass
class LayerGraph:
    """A connected DAG of layers with a unique source and a unique sink."""

    name: str
    input_size: float
    nodes: dict[int, LayerNode]
    edges: list[tuple[int, int]]
    succs: dict[int, list[int]] = field(init=False)
    preds: dict[int, list[int]] = field(init=False)

    def __post_init__(self):
        self.succs = {nid: [] for nid in self.nodes}
        self.preds = {nid: [] for nid in self.nodes}
        seen = set()
        for a, b in self.edges:
            if a not in self.nodes or b not in self.nodes:
                raise ProfileError(f"graph {self.name!r}: edge ({a}, {b}) names an unknown layer")
            if a == b:
                raise ProfileError(f"graph {self.name!r}: self-loop on layer {a}")
            if (a, b) in seen:
                raise ProfileError(f"graph {self.name!r}: duplicate edge ({a}, {b})")
            seen.add((a, b))
            self.succs[a].append(b)
            self.preds[b].append(a)
        sources = [n for n in self.nodes if not self.preds[n]]
        sinks = [n for n in self.nodes if not self.succs[n]]
        if len(sources) != 1:
            raise ProfileError(f"graph {self.name!r}: expected one source, found {sorted(sources)}")
        if len(sinks) != 1:
            raise ProfileError(f"graph {self.name!r}: expected one sink, found {sorted(sinks)}")
        self.source = sources[0]
        self.sink = sinks[0]
        self._topo = self._toposort()
        if not self._reachable(self.source, excluded=None) >= set(self.nodes):
            raise ProfileError(f"graph {self.name!r}: not connected from the source")

    def _toposort(self) -> list[int]:
        indeg = {n: len(self.preds[n]) for n in self.nodes}
        ready = sorted(n for n, d in indeg.items() if d == 0)
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for m in self.succs[n]:
                indeg[m] -= 1
                if indeg[m] == 0:
                    ready.append(m)
            ready.sort()
        if len(order) != len(self.nodes):
            cyclic = sorted(n for n, d in indeg.items() if d > 0)
            raise ProfileError(f"graph {self.name!r}: cycle involving layers {cyclic}")
        return order

    def _reachable(self, start: int, excluded: int | None) -> set[int]:
        if start == excluded:
            return set()
        seen = {start}
        stack = [start]
        while stack:
            n = stack.pop()
            for m in self.succs[n]:
                if m != excluded and m not in seen:
                    seen.add(m)
                    stack.append(m)
        return seen

    def separators(self) -> list[int]:
        """Nodes lying on every source-to-sink path, in topological order."""
        out = []
        for n in self._topo:
            if n in (self.source, self.sink):
                out.append(n)
            elif self.sink not in self._reachable(self.source, excluded=n):
                out.append(n)
        return out


def _require(record: dict, key: str, where: str):
    if key not in record:
        raise ProfileError(f"{where}: missing field {key!r}")
    return record[key]


def _parse_layers(doc: dict, where: str) -> list[LayerNode]:
    raw = _require(doc, "layers", where)
    if not isinstance(raw, list) or not raw:
        raise ProfileError(f"{where}: 'layers' must be a non-empty list")
    layers = []
    for idx, rec in enumerate(raw):
        ctx = f"{where}: layer record {idx}"
        if not isinstance(rec, dict):
            raise ProfileError(f"{ctx}: not an object")
        try:
            node = LayerNode(
                id=int(_require(rec, "id", ctx)),
                label=str(_require(rec, "label", ctx)),
                edge_time=float(_require(rec, "edge_time_ms", ctx)),
                cloud_time=float(_require(rec, "cloud_time_ms", ctx)),
                output_size=float(_require(rec, "output_size_mb", ctx)),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ProfileError):
                raise
            raise ProfileError(f"{ctx}: {exc}") from exc
        if node.edge_time <= 0 or node.cloud_time <= 0:
            raise ProfileError(f"{ctx} (id {node.id}): compute times must be > 0")
        if node.output_size < 0:
            raise ProfileError(f"{ctx} (id {node.id}): output_size_mb must be >= 0")
        layers.append(node)
    ids = [n.id for n in layers]
    if len(set(ids)) != len(ids):
        raise ProfileError(f"{where}: duplicate layer ids")
    return layers


def _profile_from_layers(name: str, input_size: float, layers: list[LayerNode]) -> DnnProfile:
    for prev, cur in zip(layers, layers[1:]):
        if cur.id != prev.id + 1:
            raise ProfileError(
                f"profile {name!r}: layer ids must be consecutive, "
                f"{prev.id} is followed by {cur.id}"
            )
    units = tuple(
        ComputeUnit(
            id=i,
            label=layer.label,
            edge_time=layer.edge_time,
            cloud_time=layer.cloud_time,
            output_size=layer.output_size,
        )
        for i, layer in enumerate(layers)
    )
    block_map = tuple((layer.id, layer.id) for layer in layers)
    return DnnProfile(name=name, input_size=input_size, units=units, block_map=block_map)


def parse_profile(doc: dict, fmt: str, where: str = "profile") -> DnnProfile | LayerGraph:
    """Build a profile or layer graph from an already-decoded JSON document."""
    if fmt not in ("layer-list", "layer-graph"):
        raise ProfileError(f"unknown profile format {fmt!r}")
    name = str(_require(doc, "name", where))
    input_size = float(_require(doc, "input_size_mb", where))
    layers = _parse_layers(doc, where)
    if fmt == "layer-list":
        return _profile_from_layers(name, input_size, layers)
    raw_edges = _require(doc, "edges", where)
    if not isinstance(raw_edges, list):
        raise ProfileError(f"{where}: 'edges' must be a list of [from, to] pairs")
    edges = []
    for idx, pair in enumerate(raw_edges):
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise ProfileError(f"{where}: edge record {idx} is not a [from, to] pair")
        edges.append((int(pair[0]), int(pair[1])))
    return LayerGraph(
        name=name,
        input_size=input_size,
        nodes={n.id: n for n in layers},
        edges=edges,
    )


def load_profile(path: str | Path, fmt: str = "layer-list") -> DnnProfile | LayerGraph:
    """Load a profile file. ``fmt`` is ``layer-list`` or ``layer-graph``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ProfileError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ProfileError(f"{path}: malformed JSON at line {exc.lineno}") from exc
    if not isinstance(doc, dict):
        raise ProfileError(f"{path}: top level must be an object")
    return parse_profile(doc, fmt, where=str(path))


def collapse_blocks(graph: LayerGraph) -> DnnProfile:
    """Collapse maximal single-entry/single-exit parallel regions into units.

    Every region between two consecutive mandatory nodes (nodes lying on all
    source-to-sink paths) must decompose into vertex-disjoint simple paths.
    A block unit sums the contained layers' compute times; its output size is
    the total leaving the region into the exit node.
    """
    seps = graph.separators()
    topo_idx = {n: i for i, n in enumerate(graph._topo)}
    buckets: dict[int, list[int]] = {i: [] for i in range(len(seps) - 1)}
    bounds = [topo_idx[s] for s in seps]
    for n in graph._topo:
        if n in seps:
            continue
        pos = topo_idx[n]
        for i in range(len(seps) - 1):
            if bounds[i] < pos < bounds[i + 1]:
                buckets[i].append(n)
                break

    units: list[ComputeUnit] = []
    block_map: list[tuple[int, int]] = []

    def add_single(node_id: int):
        node = graph.nodes[node_id]
        units.append(
            ComputeUnit(
                id=len(units),
                label=node.label,
                edge_time=node.edge_time,
                cloud_time=node.cloud_time,
                output_size=node.output_size,
            )
        )
        block_map.append((node_id, node_id))

    for i, sep in enumerate(seps):
        add_single(sep)
        if i == len(seps) - 1:
            break
        interior = buckets[i]
        if not interior:
            continue
        entry, exit_ = sep, seps[i + 1]
        region = set(interior)
        bad = []
        for n in interior:
            preds = set(graph.preds[n])
            succs = set(graph.succs[n])
            if not preds <= region | {entry} or not succs <= region | {exit_}:
                bad.append(n)
            elif len(preds) != 1 or len(succs) != 1:
                bad.append(n)
        if bad:
            raise RegionError(
                f"graph {graph.name!r}: parallel region between layers "
                f"{entry} and {exit_} is not single-entry/single-exit; "
                f"offending layers: {sorted(bad)}",
                offending=sorted(bad),
            )
        tail_output = sum(
            graph.nodes[n].output_size for n in interior if exit_ in graph.succs[n]
        )
        lo, hi = min(interior), max(interior)
        units.append(
            ComputeUnit(
                id=len(units),
                label=f"block[{lo}-{hi}]",
                edge_time=sum(graph.nodes[n].edge_time for n in interior),
                cloud_time=sum(graph.nodes[n].cloud_time for n in interior),
                output_size=tail_output,
            )
        )
        block_map.append((lo, hi))

    return DnnProfile(
        name=graph.name,
        input_size=graph.input_size,
        units=tuple(units),
        block_map=tuple(block_map),
    )


def scale_compute(profile: DnnProfile, cpu_availability: float) -> DnnProfile:
    """Inflate edge compute times for a CPU availability fraction in (0, 1].

    Cloud times are unaffected; only the edge runs under contention.
    """
    if not 0 < cpu_availability <= 1:
        raise ProfileError(
            f"cpu_availability must be in (0, 1], got {cpu_availability}"
        )
    units = tuple(
        replace(u, edge_time=u.edge_time / cpu_availability) for u in profile.units
    )
    return replace(profile, units=units)


def bundled_profile(name: str) -> DnnProfile:
    """Load one of the profiles shipped with the package by name."""
    if name not in BUNDLED_PROFILES:
        raise ProfileError(
            f"unknown bundled profile {name!r}; available: {', '.join(BUNDLED_PROFILES)}"
        )
    fname = name.replace("-", "_") + ".json"
    doc = json.loads(
        resources.files(__package__).joinpath(_BUNDLED_DIR).joinpath(fname).read_text()
    )
    if "edges" in doc:
        graph = parse_profile(doc, "layer-graph", where=name)
        assert isinstance(graph, LayerGraph)
        return collapse_blocks(graph)
    profile = parse_profile(doc, "layer-list", where=name)
    assert isinstance(profile, DnnProfile)
    return profile


def resolve_profile(ref: str) -> DnnProfile:
    """Resolve a profile reference: a bundled name or a layer-list file path."""
    if ref in BUNDLED_PROFILES:
        return bundled_profile(ref)
    path = Path(ref)
    if not path.exists():
        raise ProfileError(
            f"profile {ref!r} is neither a bundled name "
            f"({', '.join(sorted(BUNDLED_PROFILES))}) nor an existing file"
        )
    doc = json.loads(path.read_text())
    loaded = parse_profile(
        doc, "layer-graph" if "edges" in doc else "layer-list", where=str(path)
    )
    if isinstance(loaded, LayerGraph):
        return collapse_blocks(loaded)
    return loaded
