"""Event-driven model of a grid of dataflow cores with explicit traffic accounting.

Every core streams tiles through four stages (reader, unpacker, compute,
writer) coupled by circular buffers of ``cb_capacity_tiles`` slots.  Every
tile movement and every compute step is an *operation* with dependencies:

* the previous tile on the same stage of the same core,
* the upstream stage for the same tile,
* a free slot in the buffer it writes into (the tile ``capacity`` places
  earlier has been drained), and
* for activations, the producer core's write of that tile.

Data moves over channel classes whose bandwidths are aggregate chip figures.
Each class is one shared server; an operation occupies it for
``bytes / bandwidth`` and is delivered ``hops * hop_latency`` later.  Shared
servers take operations in a fixed order (layer, phase, tile, stage, core),
which every dependency respects, so the schedule is deadlock free and a
larger buffer can only relax constraints.

Weights stream through every placed core (the cores split the activation
rows).  Unicast fetches a full copy from DRAM per core; multicast fetches
once and fans out over the multicast class.
"""

from __future__ import annotations

import csv
import enum
import heapq
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Optional, Sequence

from .assignment import PrecisionAssignment
from .bfp import storage_bits
from .fidelity import TILE, fidelity_speedup
from .pipeline import PipelineConfig, denoiser_layer_id, vocoder_layer_id


class SimError(ValueError):
    pass


class ChannelClass(enum.Enum):
    SramLocal = "SramLocal"
    SramNeighbor = "SramNeighbor"
    SramMulticast = "SramMulticast"
    SramGather3Hop = "SramGather3Hop"
    SramGather10Hop = "SramGather10Hop"
    DramRow = "DramRow"
    EthernetColumn = "EthernetColumn"


#: Effective bandwidth in bytes/second of each channel class.
DEFAULT_BANDWIDTH: dict[ChannelClass, float] = {
    ChannelClass.SramLocal: 94e12,
    ChannelClass.SramNeighbor: 47e12,
    ChannelClass.SramMulticast: 24e12,
    ChannelClass.SramGather3Hop: 16e12,
    ChannelClass.SramGather10Hop: 5e12,
    ChannelClass.DramRow: 512e9,
    ChannelClass.EthernetColumn: 1e12,
}

#: Measured L40S time for the 6B-MAC reference layer; kept for ratio reports only.
L40S_LAYER_TIME_S = 60e-6
P150_LAYER_TIME_S = 31e-6

ACTIVATION_FORMAT = "BF16"
STAGES = ("reader", "unpacker", "compute", "writer")
_READER, _UNPACK, _COMPUTE, _WRITER = range(4)


def tile_bytes(fmt: str) -> int:
    return storage_bits(fmt, TILE * TILE) // 8


def _load_calibration() -> dict:
    text = resources.files("lofitts").joinpath("data/calibration.json").read_text()
    return json.loads(text)


def calibrated_mac_rate() -> float:
    """The per-core HiFi4 MAC rate fitted once to the reference layer."""
    return float(_load_calibration()["mac_rate"])


class Delivery(enum.Enum):
    Unicast = "unicast"
    Multicast = "multicast"

    @classmethod
    def parse(cls, value) -> "Delivery":
        if isinstance(value, cls):
            return value
        for d in cls:
            if d.value == str(value).lower():
                return d
        raise SimError(f"unknown delivery mode {value!r}")


@dataclass(frozen=True)
class GridConfig:
    rows: int = 10
    cols: int = 14
    sram_bytes_per_core: int = 1_572_864
    cb_capacity_tiles: int = 4
    mac_rate: float = field(default_factory=calibrated_mac_rate)
    hop_latency: float = 1e-9
    bandwidth: Mapping[ChannelClass, float] = field(default_factory=lambda: dict(DEFAULT_BANDWIDTH))

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise SimError("grid dimensions must be positive")
        if self.cb_capacity_tiles < 1:
            raise SimError("cb_capacity_tiles must be >= 1")
        if self.sram_bytes_per_core < 1:
            raise SimError("sram_bytes_per_core must be positive")
        if not self.mac_rate > 0:
            raise SimError("mac_rate must be positive")
        if self.hop_latency < 0:
            raise SimError("hop_latency must be >= 0")
        bw = dict(DEFAULT_BANDWIDTH)
        for k, v in dict(self.bandwidth).items():
            k = ChannelClass(k.value if isinstance(k, ChannelClass) else k)
            if not v > 0:
                raise SimError(f"bandwidth of {k.value} must be positive")
            bw[k] = float(v)
        object.__setattr__(self, "bandwidth", bw)

    @property
    def n_cores(self) -> int:
        return self.rows * self.cols

    def core_id(self, core: tuple[int, int]) -> int:
        return core[0] * self.cols + core[1]

    def bandwidth_of(self, channel: ChannelClass) -> float:
        return self.bandwidth[channel]

    def cb_bytes(self) -> int:
        return 3 * self.cb_capacity_tiles * tile_bytes("BF16")

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "sram_bytes_per_core": self.sram_bytes_per_core,
            "cb_capacity_tiles": self.cb_capacity_tiles,
            "mac_rate": self.mac_rate,
            "hop_latency": self.hop_latency,
            "bandwidth": {k.value: v for k, v in self.bandwidth.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GridConfig":
        d = dict(d)
        known = {"rows", "cols", "sram_bytes_per_core", "cb_capacity_tiles", "mac_rate", "hop_latency", "bandwidth"}
        unknown = set(d) - known
        if unknown:
            raise SimError(f"unknown grid fields: {sorted(unknown)}")
        if "bandwidth" in d:
            try:
                d["bandwidth"] = {ChannelClass(k): v for k, v in d["bandwidth"].items()}
            except ValueError as exc:
                raise SimError(f"grid.bandwidth: {exc}") from None
        return cls(**d)


def bandwidth_of(channel: ChannelClass, grid: Optional[GridConfig] = None) -> float:
    if grid is None:
        return DEFAULT_BANDWIDTH[channel]
    return grid.bandwidth_of(channel)


@dataclass(frozen=True)
class LayerSpec:
    """One matmul-like layer.

    ``input_source`` is ``"previous"`` (output of the preceding layer, or
    DRAM for the first layer), ``"dram"``, or ``"sram"`` (already resident
    on the placed cores; no traffic).  ``output_to_dram`` defaults to true
    for the last layer of a graph only.
    """

    layer_id: str
    macs: int
    weight_tiles: int
    in_tiles: int
    out_tiles: int
    placement: tuple[tuple[int, int], ...]
    delivery: Delivery = Delivery.Multicast
    subgraph: str = ""
    input_source: str = "previous"
    output_to_dram: Optional[bool] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "placement", tuple(tuple(int(v) for v in c) for c in self.placement))
        object.__setattr__(self, "delivery", Delivery.parse(self.delivery))
        if self.macs < 0 or self.weight_tiles < 0 or self.in_tiles < 0 or self.out_tiles < 0:
            raise SimError(f"layer {self.layer_id}: counts must be >= 0")
        if not self.placement:
            raise SimError(f"layer {self.layer_id}: placement is empty")
        if len(set(self.placement)) != len(self.placement):
            raise SimError(f"layer {self.layer_id}: placement repeats a core")
        if self.input_source not in ("previous", "dram", "sram"):
            raise SimError(f"layer {self.layer_id}: bad input_source {self.input_source!r}")

    def weight_bytes(self, fmt: str) -> int:
        return self.weight_tiles * tile_bytes(fmt)

    def to_dict(self) -> dict:
        d = {
            "layer_id": self.layer_id,
            "macs": self.macs,
            "weight_tiles": self.weight_tiles,
            "in_tiles": self.in_tiles,
            "out_tiles": self.out_tiles,
            "placement": [list(c) for c in self.placement],
            "delivery": self.delivery.value,
            "subgraph": self.subgraph,
            "input_source": self.input_source,
        }
        if self.output_to_dram is not None:
            d["output_to_dram"] = self.output_to_dram
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSpec":
        try:
            return cls(
                layer_id=str(d["layer_id"]),
                macs=int(d["macs"]),
                weight_tiles=int(d["weight_tiles"]),
                in_tiles=int(d["in_tiles"]),
                out_tiles=int(d["out_tiles"]),
                placement=tuple(tuple(c) for c in d["placement"]),
                delivery=d.get("delivery", "multicast"),
                subgraph=d.get("subgraph", ""),
                input_source=d.get("input_source", "previous"),
                output_to_dram=d.get("output_to_dram"),
            )
        except KeyError as exc:
            raise SimError(f"layer is missing field {exc.args[0]!r}") from None


def graph_to_json(graph: Sequence[LayerSpec]) -> str:
    return json.dumps({"layers": [layer.to_dict() for layer in graph]}, indent=2)


def graph_from_json(text: str) -> list[LayerSpec]:
    return [LayerSpec.from_dict(d) for d in json.loads(text)["layers"]]


@dataclass
class TrafficReport:
    bytes_by_channel: dict[str, int]
    delivered_by_channel: dict[str, int]
    dram_reads: int
    dram_writes: int
    dram_read_breakdown: dict[str, int]
    dram_write_breakdown: dict[str, int]
    layer_times: dict[str, tuple[float, float]]
    total_time: float
    stall_time: dict[str, float]
    compute_busy: dict[str, float]
    weight_fetch_events: int
    spilled_layers: list[str]
    events: Optional[list[dict]] = None

    @property
    def transfer_volume(self) -> int:
        """Off-chip bytes moved (DRAM reads plus writes)."""
        return self.dram_reads + self.dram_writes

    def layer_time(self, layer_id: str) -> float:
        start, end = self.layer_times[layer_id]
        return end - start

    def to_dict(self) -> dict:
        return {
            "bytes_by_channel": self.bytes_by_channel,
            "delivered_by_channel": self.delivered_by_channel,
            "dram_reads": self.dram_reads,
            "dram_writes": self.dram_writes,
            "dram_read_breakdown": self.dram_read_breakdown,
            "dram_write_breakdown": self.dram_write_breakdown,
            "transfer_volume": self.transfer_volume,
            "layer_times": {k: {"start": s, "end": e, "span": e - s} for k, (s, e) in self.layer_times.items()},
            "total_time": self.total_time,
            "stall_time": self.stall_time,
            "compute_busy": self.compute_busy,
            "weight_fetch_events": self.weight_fetch_events,
            "spilled_layers": self.spilled_layers,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def events_csv(self) -> str:
        if self.events is None:
            raise SimError("report was produced without a trace")
        buf = io.StringIO()
        cols = ["op", "layer", "core", "stage", "kind", "channel", "bytes", "ready", "start", "finish"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for ev in self.events:
            w.writerow({k: ev[k] for k in cols})
        return buf.getvalue()


def _partition(n: int, parts: int, k: int) -> range:
    return range(k * n // parts, (k + 1) * n // parts)


def hop_channel(hops: int) -> ChannelClass:
    """Channel class for a core-to-core activation transfer over ``hops`` hops."""
    if hops == 0:
        return ChannelClass.SramLocal
    if hops == 1:
        return ChannelClass.SramNeighbor
    if hops <= 3:
        return ChannelClass.SramGather3Hop
    return ChannelClass.SramGather10Hop


def _manhattan(a: tuple[int, int], b: tuple[int, int]) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def validate(graph: Sequence[LayerSpec], grid: GridConfig, assignment: PrecisionAssignment) -> None:
    seen = set()
    for i, layer in enumerate(graph):
        if layer.layer_id in seen:
            raise SimError(f"duplicate layer id {layer.layer_id!r}")
        seen.add(layer.layer_id)
        for r, c in layer.placement:
            if not (0 <= r < grid.rows and 0 <= c < grid.cols):
                raise SimError(f"layer {layer.layer_id}: core ({r}, {c}) is outside the {grid.rows}x{grid.cols} grid")
        if layer.layer_id not in assignment:
            raise SimError(f"layer {layer.layer_id} has no precision assignment")
        if layer.input_source == "previous" and i > 0 and graph[i - 1].out_tiles != layer.in_tiles:
            raise SimError(
                f"layer {layer.layer_id}: in_tiles {layer.in_tiles} != previous out_tiles {graph[i - 1].out_tiles}"
            )
    if grid.cb_bytes() > grid.sram_bytes_per_core:
        raise SimError(
            f"circular buffers need {grid.cb_bytes()} bytes per core, more than the "
            f"{grid.sram_bytes_per_core}-byte SRAM"
        )


def _sorted_cores(layer: LayerSpec, grid: GridConfig) -> list[tuple[int, int]]:
    return sorted(layer.placement, key=grid.core_id)


def plan_spills(graph: Sequence[LayerSpec], grid: GridConfig) -> set[int]:
    """Indices of layers whose output goes to DRAM instead of staying on chip.

    A core holds, while running layer ``i``: its circular buffers, its input
    slice, its output slice, and its slice of layer ``i - 1``'s output until
    consumers have read it.  While any core is over budget, the largest
    on-chip output involved in the over-commit is spilled (earlier layer
    first on ties).
    """
    act = tile_bytes(ACTIVATION_FORMAT)
    budget = grid.sram_bytes_per_core - grid.cb_bytes()
    n = len(graph)
    forced = {i for i, layer in enumerate(graph) if _output_to_dram(graph, i)}
    spilled = set(forced)

    def share(layer: LayerSpec, tiles: int, core) -> int:
        cores = _sorted_cores(layer, grid)
        if core not in cores:
            return 0
        return len(_partition(tiles, len(cores), cores.index(core))) * act

    for i, layer in enumerate(graph):
        for core in layer.placement:
            if share(layer, layer.in_tiles, core) > budget:
                raise SimError(
                    f"layer {layer.layer_id}: input slice on core {core} does not fit in SRAM "
                    f"({share(layer, layer.in_tiles, core)} > {budget} bytes after circular buffers)"
                )

    while True:
        worst = None
        for i, layer in enumerate(graph):
            for core in layer.placement:
                held = []
                if i not in spilled:
                    held.append(i)
                if i > 0 and (i - 1) not in spilled:
                    held.append(i - 1)
                use = share(layer, layer.in_tiles, core)
                use += sum(share(graph[h], graph[h].out_tiles, core) for h in held)
                if use > budget and held:
                    worst = held if worst is None else worst
                    break
            if worst is not None:
                break
        if worst is None:
            return spilled
        sizes = [(graph[h].out_tiles, -h) for h in worst]
        pick = -max(sizes)[1]
        spilled.add(pick)
        if len(spilled) > n:
            raise SimError("spill planning did not converge")


def _output_to_dram(graph: Sequence[LayerSpec], i: int) -> bool:
    layer = graph[i]
    if layer.output_to_dram is not None:
        return layer.output_to_dram
    return i == len(graph) - 1


class _Ops:
    """Flat operation store; parallel lists keep the hot loop cheap."""

    def __init__(self) -> None:
        self.dur: list[float] = []
        self.lat: list[float] = []
        self.res: list[Optional[object]] = []
        self.key: list[tuple] = []
        self.deps: list[list[int]] = []
        self.meta: list[tuple] = []

    def add(self, key: tuple, dur: float, lat: float, res, deps: Iterable[Optional[int]], meta: tuple) -> int:
        i = len(self.dur)
        self.dur.append(dur)
        self.lat.append(lat)
        self.res.append(res)
        self.key.append(key)
        self.deps.append([d for d in deps if d is not None])
        self.meta.append(meta)
        return i


def _at(seq: list[int], i: int) -> Optional[int]:
    return seq[i] if i >= 0 else None


def simulate(
    graph: Sequence[LayerSpec],
    grid: GridConfig,
    assignment: PrecisionAssignment,
    delivery: Optional[Delivery] = None,
    trace: bool = False,
) -> TrafficReport:
    """Run the graph on the grid; ``delivery`` overrides every layer's mode."""
    validate(graph, grid, assignment)
    spilled = plan_spills(graph, grid)
    cap = grid.cb_capacity_tiles
    bw = grid.bandwidth
    act_bytes = tile_bytes(ACTIVATION_FORMAT)
    ops = _Ops()

    injected = {c.value: 0 for c in ChannelClass}
    dram_reads = {"weights": 0, "activations": 0, "spill": 0}
    dram_writes = {"output": 0, "spill": 0}
    weight_fetch_events = 0

    def transfer(channel: ChannelClass, nbytes: int, hops: int, fanout: int = 1):
        injected[channel.value] += nbytes * fanout
        return nbytes / bw[channel], hops * grid.hop_latency, channel

    reader: dict[int, list[int]] = {}
    unpack: dict[int, list[int]] = {}
    compute: dict[int, list[int]] = {}
    writer: dict[int, list[int]] = {}
    prev_out: dict[int, tuple[int, tuple[int, int]]] = {}

    for li, layer in enumerate(graph):
        prec = assignment[layer.layer_id]
        mode = delivery or layer.delivery
        wbytes = tile_bytes(prec.storage_format)
        cores = _sorted_cores(layer, grid)
        R = len(cores)
        if R == 1:
            mode = Delivery.Unicast
        rate = grid.mac_rate * fidelity_speedup(prec.fidelity) * prec.fusion
        out_now: dict[int, tuple[int, tuple[int, int]]] = {}
        to_dram = li in spilled
        source = layer.input_source
        if source == "previous":
            source = "dram" if li == 0 else "previous"
        prev_spilled = li > 0 and (li - 1) in spilled

        # activation slices and per-core item counts
        slices = [_partition(layer.in_tiles, R, k) for k in range(R)]
        outs = [_partition(layer.out_tiles, R, k) for k in range(R)]
        for k, core in enumerate(cores):
            cid = grid.core_id(core)
            for seq in (reader, unpack, compute, writer):
                seq.setdefault(cid, [])

        def compute_time(k: int) -> tuple[float, float]:
            share = layer.macs * (len(slices[k]) / layer.in_tiles if layer.in_tiles else 1.0 / R)
            if layer.weight_tiles:
                return 0.0, share / layer.weight_tiles / rate
            return (share / len(slices[k]) / rate if len(slices[k]) else 0.0), 0.0

        def add_item(k: int, core, phase: int, pos: int, reader_op: int, ct: float) -> None:
            cid = grid.core_id(core)
            q = len(unpack[cid])
            nbytes = act_bytes if phase == 0 else wbytes
            d, lt, ch = transfer(ChannelClass.SramLocal, nbytes, 0)
            u = ops.add((li, phase, pos, _UNPACK, cid), d, lt, ch,
                        [reader_op, _at(unpack[cid], q - 1), _at(compute[cid], q - cap)],
                        (layer.layer_id, cid, _UNPACK, "unpack", ch.value, nbytes))
            unpack[cid].append(u)
            c = ops.add((li, phase, pos, _COMPUTE, cid), ct, 0.0, ("compute", cid), [u],
                        (layer.layer_id, cid, _COMPUTE, "compute", "", 0))
            compute[cid].append(c)

        # phase 0: activation tiles
        for k, core in enumerate(cores):
            cid = grid.core_id(core)
            act_ct, _ = compute_time(k)
            for pos, t in enumerate(slices[k]):
                q = len(reader[cid])
                base_deps = [_at(reader[cid], q - 1), _at(unpack[cid], q - cap)]
                if source == "sram":
                    r = ops.add((li, 0, pos, _READER, cid), 0.0, 0.0, None, base_deps,
                                (layer.layer_id, cid, _READER, "resident", "", 0))
                elif source == "dram" or prev_spilled:
                    d, lt, ch = transfer(ChannelClass.DramRow, act_bytes, 0)
                    dep = prev_out[t][0] if source == "previous" else None
                    r = ops.add((li, 0, pos, _READER, cid), d, lt, ch, base_deps + [dep],
                                (layer.layer_id, cid, _READER, "act_dram", ch.value, act_bytes))
                    dram_reads["spill" if source == "previous" else "activations"] += act_bytes
                else:
                    prod_op, prod_core = prev_out[t]
                    hops = _manhattan(prod_core, core)
                    d, lt, ch = transfer(hop_channel(hops), act_bytes, hops)
                    r = ops.add((li, 0, pos, _READER, cid), d, lt, ch, base_deps + [prod_op],
                                (layer.layer_id, cid, _READER, "act_noc", ch.value, act_bytes))
                reader[cid].append(r)
                add_item(k, core, 0, pos, r, act_ct)

        # phase 1: weight tiles
        ids = [grid.core_id(c) for c in cores]
        if mode is Delivery.Multicast:
            src = cores[0]
            span = max(_manhattan(src, c) for c in cores)
        for w in range(layer.weight_tiles):
            if mode is Delivery.Multicast:
                deps = []
                for cid in ids:
                    q = len(reader[cid])
                    deps += [_at(reader[cid], q - 1), _at(unpack[cid], q - cap)]
                d, lt, ch = transfer(ChannelClass.DramRow, wbytes, 0)
                fetch = ops.add((li, 1, w, _READER, ids[0]), d, lt, ch, deps,
                                (layer.layer_id, ids[0], _READER, "weight_dram", ch.value, wbytes))
                dram_reads["weights"] += wbytes
                weight_fetch_events += 1
                d, lt, ch = transfer(ChannelClass.SramMulticast, wbytes, span, fanout=R)
                mc = ops.add((li, 1, w, _READER, ids[0]), d, lt, ch, [fetch],
                             (layer.layer_id, ids[0], _READER, "weight_mcast", ch.value, wbytes * R))
                for k, core in enumerate(cores):
                    reader[ids[k]].append(mc)
                    add_item(k, core, 1, w, mc, compute_time(k)[1])
            else:
                for k, core in enumerate(cores):
                    cid = ids[k]
                    q = len(reader[cid])
                    d, lt, ch = transfer(ChannelClass.DramRow, wbytes, 0)
                    r = ops.add((li, 1, w, _READER, cid), d, lt, ch,
                                [_at(reader[cid], q - 1), _at(unpack[cid], q - cap)],
                                (layer.layer_id, cid, _READER, "weight_dram", ch.value, wbytes))
                    dram_reads["weights"] += wbytes
                    weight_fetch_events += 1
                    reader[cid].append(r)
                    add_item(k, core, 1, w, r, compute_time(k)[1])

        # phase 2: pack results into the output buffer and write them out
        for k, core in enumerate(cores):
            cid = ids[k]
            last = _at(compute[cid], len(compute[cid]) - 1)
            for pos, t in enumerate(outs[k]):
                o = len(writer[cid])
                e = ops.add((li, 2, pos, _COMPUTE, cid), 0.0, 0.0, ("compute", cid),
                            [last, _at(writer[cid], o - cap)],
                            (layer.layer_id, cid, _COMPUTE, "pack", "", 0))
                compute[cid].append(e)
                last = e
                if to_dram:
                    d, lt, ch = transfer(ChannelClass.DramRow, act_bytes, 0)
                    dram_writes["spill" if not _output_to_dram(graph, li) else "output"] += act_bytes
                    kind = "out_dram"
                else:
                    d, lt, ch = transfer(ChannelClass.SramLocal, act_bytes, 0)
                    kind = "out_sram"
                wr = ops.add((li, 2, pos, _WRITER, cid), d, lt, ch, [e, _at(writer[cid], o - 1)],
                             (layer.layer_id, cid, _WRITER, kind, ch.value, act_bytes))
                writer[cid].append(wr)
                out_now[t] = (wr, core)
        prev_out = out_now

    start, finish, ready = _run(ops)

    # delivered bytes tallied from completed operations, independent of `transfer`
    delivered = {c.value: 0 for c in ChannelClass}
    for i, meta in enumerate(ops.meta):
        if meta[4]:
            delivered[meta[4]] += meta[5]

    layer_times: dict[str, tuple[float, float]] = {}
    compute_busy: dict[str, float] = {}
    for layer in graph:
        layer_times[layer.layer_id] = (math.inf, 0.0)
        compute_busy[layer.layer_id] = 0.0
    for i, meta in enumerate(ops.meta):
        lid = meta[0]
        s, e = layer_times[lid]
        layer_times[lid] = (min(s, start[i]), max(e, finish[i]))
        if meta[3] == "compute":
            compute_busy[lid] += ops.dur[i]
    layer_times = {k: (0.0 if math.isinf(s) else s, e) for k, (s, e) in layer_times.items()}

    stall = {name: 0.0 for name in STAGES}
    for stage, seqs in ((_READER, reader), (_UNPACK, unpack), (_COMPUTE, compute), (_WRITER, writer)):
        for seq in seqs.values():
            prev_end = None
            for op in seq:
                if prev_end is not None and start[op] > prev_end:
                    stall[STAGES[stage]] += start[op] - prev_end
                prev_end = max(prev_end or 0.0, finish[op])

    events = None
    if trace:
        events = [
            {"op": i, "layer": m[0], "core": m[1], "stage": STAGES[m[2]], "kind": m[3], "channel": m[4],
             "bytes": m[5], "ready": ready[i], "start": start[i], "finish": finish[i],
             "deps": list(ops.deps[i])}
            for i, m in enumerate(ops.meta)
        ]

    return TrafficReport(
        bytes_by_channel=injected,
        delivered_by_channel=delivered,
        dram_reads=sum(dram_reads.values()),
        dram_writes=sum(dram_writes.values()),
        dram_read_breakdown=dram_reads,
        dram_write_breakdown=dram_writes,
        layer_times=layer_times,
        total_time=max(finish, default=0.0),
        stall_time=stall,
        compute_busy=compute_busy,
        weight_fetch_events=weight_fetch_events,
        spilled_layers=[graph[i].layer_id for i in sorted(spilled) if not _output_to_dram(graph, i)],
        events=events,
    )


def _run(ops: _Ops) -> tuple[list[float], list[float], list[float]]:
    """Event loop: completions pop in (time, core, stage, op) order.

    An operation is ready when its last dependency completes.  A shared
    resource starts its operations strictly in key order, each at
    ``max(ready, resource free)``.
    """
    n = len(ops.dur)
    pending = [len(d) for d in ops.deps]
    dependents: list[list[int]] = [[] for _ in range(n)]
    for i, deps in enumerate(ops.deps):
        for d in deps:
            dependents[d].append(i)

    order: dict[object, list[int]] = {}
    for i, r in enumerate(ops.res):
        if r is not None:
            order.setdefault(r, []).append(i)
    for r, lst in order.items():
        lst.sort(key=ops.key.__getitem__)
    cursor = {r: 0 for r in order}
    free = {r: 0.0 for r in order}

    ready = [math.nan] * n
    start = [math.nan] * n
    finish = [math.nan] * n
    heap: list[tuple] = []

    def launch(i: int, t: float) -> None:
        start[i] = t
        finish[i] = t + ops.dur[i] + ops.lat[i]
        k = ops.key[i]
        heapq.heappush(heap, (finish[i], k[4], k[3], i))

    def pump(r) -> None:
        lst = order[r]
        c = cursor[r]
        while c < len(lst) and not math.isnan(ready[lst[c]]):
            i = lst[c]
            t = max(ready[i], free[r])
            launch(i, t)
            free[r] = t + ops.dur[i]
            c += 1
        cursor[r] = c

    def make_ready(i: int, t: float) -> None:
        ready[i] = t
        r = ops.res[i]
        if r is None:
            launch(i, t)
        elif order[r][cursor[r]] == i:
            pump(r)

    for i in range(n):
        if pending[i] == 0:
            make_ready(i, 0.0)
    done = 0
    while heap:
        t, _, _, i = heapq.heappop(heap)
        done += 1
        for j in dependents[i]:
            pending[j] -= 1
            if pending[j] == 0:
                make_ready(j, t)
    if done != n:
        raise SimError(f"simulation deadlocked with {n - done} operations unfinished")
    return start, finish, ready


def compare_delivery(
    graph: Sequence[LayerSpec], grid: GridConfig, assignment: PrecisionAssignment
) -> tuple[TrafficReport, TrafficReport]:
    """(unicast, multicast) reports for identical inputs."""
    return (
        simulate(graph, grid, assignment, Delivery.Unicast),
        simulate(graph, grid, assignment, Delivery.Multicast),
    )


def delivery_delta(unicast: TrafficReport, multicast: TrafficReport) -> dict:
    return {
        "dram_read_bytes_saved": unicast.dram_reads - multicast.dram_reads,
        "weight_read_ratio": (unicast.dram_read_breakdown["weights"] / multicast.dram_read_breakdown["weights"])
        if multicast.dram_read_breakdown["weights"] else 1.0,
        "time_saved": unicast.total_time - multicast.total_time,
        "speedup": unicast.total_time / multicast.total_time if multicast.total_time else 1.0,
    }


def effective_compute(graph: Sequence[LayerSpec], assignment: PrecisionAssignment) -> dict[str, float]:
    """HiFi4-equivalent MACs per subgraph: ``macs / (speedup * fusion)``."""
    out: dict[str, float] = {}
    for layer in graph:
        prec = assignment[layer.layer_id]
        out[layer.subgraph] = out.get(layer.subgraph, 0.0) + layer.macs / (fidelity_speedup(prec.fidelity) * prec.fusion)
    return out


def compute_reduction(
    assignment: PrecisionAssignment, baseline: PrecisionAssignment, graph: Sequence[LayerSpec]
) -> dict[str, float]:
    """Baseline effective compute over assigned effective compute, per subgraph."""
    base = effective_compute(graph, baseline)
    new = effective_compute(graph, assignment)
    return {k: (base[k] / new[k] if new[k] else 1.0) for k in base}



REFERENCE_LAYER_MACS = 6_000_000_000


def reference_layer(grid: GridConfig, k: int = 1024, n: int = 1024) -> LayerSpec:
    """The calibration anchor: about 6e9 MACs as ``M x k @ k x n`` on every core.

    Input rows are already resident and the output stays in SRAM, so the
    span measures the layer alone.
    """
    row_tiles = math.ceil(REFERENCE_LAYER_MACS / (k * n) / TILE)
    cores = tuple((r, c) for r in range(grid.rows) for c in range(grid.cols))
    return LayerSpec(
        "reference",
        REFERENCE_LAYER_MACS,
        weight_tiles=(k // TILE) * (n // TILE),
        in_tiles=row_tiles * (k // TILE),
        out_tiles=row_tiles * (n // TILE),
        placement=cores,
        input_source="sram",
        output_to_dram=False,
    )


def reference_layer_time(grid: GridConfig) -> float:
    layer = reference_layer(grid)
    report = simulate([layer], grid, PrecisionAssignment.uniform([layer.layer_id]))
    return report.layer_time(layer.layer_id)


def fit_mac_rate(grid: GridConfig, target: float = P150_LAYER_TIME_S, tol: float = 1e-4, max_iter: int = 8) -> float:
    """Solve ``reference_layer_time(rate) == target`` by secant steps in ``1 / rate``.

    The span is close to affine in ``1 / rate`` when compute dominates, so a
    few steps suffice.
    """
    def span(x: float) -> float:
        return reference_layer_time(GridConfig(**{**grid.to_dict(), "mac_rate": 1.0 / x,
                                                  "bandwidth": grid.bandwidth})) - target

    x0 = 1.0 / grid.mac_rate
    x1 = x0 * 1.1
    f0, f1 = span(x0), span(x1)
    for _ in range(max_iter):
        if abs(f1) <= tol * target or f1 == f0:
            break
        x0, x1, f0 = x1, x1 - f1 * (x1 - x0) / (f1 - f0), f1
        f1 = span(x1)
    if abs(f1) > 0.01 * target:
        raise SimError(f"calibration did not converge (residual {f1:.3e} s)")
    return 1.0 / x1


def pipeline_graph(config: PipelineConfig, grid: GridConfig, cores_per_layer: int = 2,
                   delivery: Delivery = Delivery.Multicast) -> list[LayerSpec]:
    """Unrolled toy pipeline as a layer chain, one row of the grid per layer (wrapping)."""
    if cores_per_layer > grid.cols:
        raise SimError(f"cores_per_layer {cores_per_layer} exceeds {grid.cols} columns")
    d = config.latent_dim
    row_tiles = math.ceil(config.frames / TILE)
    k_tiles = math.ceil(d / TILE)
    ids = [(lid, "diffusion") for lid in (denoiser_layer_id(t, i) for t in range(config.diffusion_steps)
                                          for i in range(config.denoiser_layers))]
    ids += [(vocoder_layer_id(j), "vocoder") for j in range(config.vocoder_layers)]
    graph = []
    for i, (lid, sub) in enumerate(ids):
        row = i % grid.rows
        graph.append(LayerSpec(
            lid,
            macs=config.frames * d * d,
            weight_tiles=k_tiles * k_tiles,
            in_tiles=row_tiles * k_tiles,
            out_tiles=row_tiles * k_tiles,
            placement=tuple((row, c) for c in range(cores_per_layer)),
            delivery=delivery,
            subgraph=sub,
        ))
    return graph


def transfer_volume_reduction(graph: Sequence[LayerSpec], grid: GridConfig,
                              assignment: PrecisionAssignment, baseline: PrecisionAssignment) -> dict:
    """Baseline under unicast against ``assignment`` under multicast."""
    before = simulate(graph, grid, baseline, Delivery.Unicast)
    after = simulate(graph, grid, assignment, Delivery.Multicast)
    return {
        "baseline_unicast_bytes": before.transfer_volume,
        "assigned_multicast_bytes": after.transfer_volume,
        "reduction": before.transfer_volume / after.transfer_volume,
        "baseline_time_s": before.total_time,
        "assigned_time_s": after.total_time,
    }
