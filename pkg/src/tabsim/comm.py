"""Collective communication costs on the NVLink ring and on TAB shared memory.

Payload conventions (``CollectiveRequest.payload_per_gpu``):

* AllReduce / ReduceScatter: the full tensor T held by every xPU.
* AllGather: the shard each xPU contributes; the gathered result is N times it.
* AllToAll: the bytes each xPU sends in total (1/N of it goes to each peer).
* P2P: the message size.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

from .exceptions import FabricMismatchError
from .hardware import FabricKind, FabricSpec, PrimitiveOp, primitive_latency


class CollectiveKind(str, Enum):
    ALL_REDUCE = "all_reduce"
    REDUCE_SCATTER = "reduce_scatter"
    ALL_GATHER = "all_gather"
    ALL_TO_ALL = "all_to_all"
    P2P = "p2p"


@dataclass(frozen=True)
class CollectiveRequest:
    kind: CollectiveKind
    payload_per_gpu: int
    participants: int

    def __post_init__(self):
        object.__setattr__(self, "kind", CollectiveKind(self.kind))
        if self.participants < 2:
            raise ValueError("a collective needs at least 2 participants")
        if self.payload_per_gpu <= 0:
            raise ValueError("payload_per_gpu must be positive")


@dataclass(frozen=True)
class TabPhase:
    op: PrimitiveOp
    size: int


def tab_plan(req: CollectiveRequest) -> Tuple[TabPhase, TabPhase, TabPhase]:
    """Write phase, notification barrier and read-back phase of a TAB collective."""
    n, p = req.participants, req.payload_per_gpu
    notify = TabPhase(PrimitiveOp.NOTIFICATION, 0)
    kind = req.kind
    if kind is CollectiveKind.ALL_REDUCE:
        return TabPhase(PrimitiveOp.WRITE_ACCUMULATE, p), notify, TabPhase(PrimitiveOp.READ, p)
    if kind is CollectiveKind.REDUCE_SCATTER:
        return TabPhase(PrimitiveOp.WRITE_ACCUMULATE, p), notify, TabPhase(PrimitiveOp.READ, -(-p // n))
    if kind is CollectiveKind.ALL_GATHER:
        return TabPhase(PrimitiveOp.WRITE, p), notify, TabPhase(PrimitiveOp.READ, n * p)
    if kind is CollectiveKind.ALL_TO_ALL:
        # the receiver reads the N-1 chunks its peers addressed to it
        own = p // n
        return TabPhase(PrimitiveOp.WRITE, p), notify, TabPhase(PrimitiveOp.READ, p - own)
    return TabPhase(PrimitiveOp.WRITE, p), notify, TabPhase(PrimitiveOp.READ, p)


def _require(fabric: FabricSpec, kind: FabricKind):
    if fabric.kind is not kind:
        raise FabricMismatchError(f"expected a {kind.value} fabric, got {fabric.kind.value}")


def collective_time_tab(req: CollectiveRequest, fabric: FabricSpec) -> int:
    """Duration in picoseconds of a collective over TAB shared memory.

    All xPUs run their write phase in parallel, wait for the completion
    notification, then read back in parallel, so the time is the sum of the
    three phases seen by one xPU.
    """
    _require(fabric, FabricKind.TAB_SHARED_MEMORY)
    return sum(primitive_latency(ph.op, ph.size, fabric) for ph in tab_plan(req))


def ring_schedule(req: CollectiveRequest) -> Tuple[int, int]:
    """(sequential steps, bytes per step) of the ring implementation."""
    n, p = req.participants, req.payload_per_gpu
    kind = req.kind
    if kind is CollectiveKind.ALL_REDUCE:
        return 2 * (n - 1), -(-p // n)
    if kind is CollectiveKind.REDUCE_SCATTER:
        return n - 1, -(-p // n)
    if kind is CollectiveKind.ALL_GATHER:
        return n - 1, p
    if kind is CollectiveKind.ALL_TO_ALL:
        return n - 1, -(-p // n)
    return 1, p


def collective_time_nvlink(req: CollectiveRequest, fabric: FabricSpec) -> int:
    """Duration in picoseconds of a ring collective on NVLink.

    Every step pays the per-hop write latency plus the chunk's transfer time.
    """
    _require(fabric, FabricKind.NVLINK_RING)
    steps, chunk = ring_schedule(req)
    return steps * primitive_latency(PrimitiveOp.WRITE, chunk, fabric)


def collective_time(req: CollectiveRequest, fabric: FabricSpec) -> int:
    if fabric.kind is FabricKind.TAB_SHARED_MEMORY:
        return collective_time_tab(req, fabric)
    return collective_time_nvlink(req, fabric)


@dataclass(frozen=True)
class CollectiveTraffic:
    """Per-xPU fabric traffic of one collective.

    ``rounds`` counts sequential data-transfer rounds: ring steps on NVLink,
    accumulate rounds on TAB.
    """

    rounds: int
    bytes_sent: int
    bytes_received: int

    @property
    def total(self) -> int:
        return self.bytes_sent + self.bytes_received


def _chunk_sizes(total: int, n: int) -> List[int]:
    base, extra = divmod(total, n)
    return [base + (1 if i < extra else 0) for i in range(n)]


def collective_traffic(req: CollectiveRequest, fabric_kind: FabricKind, rank: int = 0) -> CollectiveTraffic:
    """Count the bytes xPU ``rank`` sends and receives by walking the schedule."""
    fabric_kind = FabricKind(fabric_kind)
    n, p = req.participants, req.payload_per_gpu
    if fabric_kind is FabricKind.TAB_SHARED_MEMORY:
        write, _, read = tab_plan(req)
        return CollectiveTraffic(1, write.size, read.size)

    kind = req.kind
    sent = received = 0
    if kind in (CollectiveKind.ALL_REDUCE, CollectiveKind.REDUCE_SCATTER):
        chunks = _chunk_sizes(p, n)
        steps = n - 1
        # reduce-scatter: at step s rank r forwards chunk (r - s) and receives (r - s - 1)
        for s in range(steps):
            sent += chunks[(rank - s) % n]
            received += chunks[(rank - s - 1) % n]
        if kind is CollectiveKind.ALL_REDUCE:
            # all-gather of the reduced chunks: rank r owns chunk (r + 1) after reduce-scatter
            for s in range(steps):
                sent += chunks[(rank + 1 - s) % n]
                received += chunks[(rank - s) % n]
            steps *= 2
        return CollectiveTraffic(steps, sent, received)
    if kind is CollectiveKind.ALL_GATHER:
        return CollectiveTraffic(n - 1, (n - 1) * p, (n - 1) * p)
    if kind is CollectiveKind.ALL_TO_ALL:
        chunks = _chunk_sizes(p, n)
        out = sum(c for i, c in enumerate(chunks) if i != rank)
        return CollectiveTraffic(n - 1, out, out)
    return CollectiveTraffic(1, p, p)


@dataclass(frozen=True)
class SpeedupReport:
    enabler1_latency: float
    enabler1_bandwidth: float
    enabler2_latency: float
    enabler2_bandwidth: float
    overall_latency_bound: float
    overall_bandwidth_bound: float


def speedup_decomposition(n: int, lat_nv: float, lat_fh: float, bw_nv: float, bw_fh: float,
                          round_latency_ratio: bool = False) -> SpeedupReport:
    """AllReduce speed-up of TAB over a ring, split into its two sources.

    Enabler 1 is the reduction in transfer count (a ring needs 2(N-1) rounds,
    in-memory accumulation needs one); enabler 2 is the raw fabric advantage.
    ``round_latency_ratio`` rounds the latency ratio to the nearest integer.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    if min(lat_nv, lat_fh, bw_nv, bw_fh) <= 0:
        raise ValueError("latencies and bandwidths must be positive")
    e1_lat = float(2 * (n - 1))
    e1_bw = 2 * (n - 1) / n
    e2_lat = lat_nv / lat_fh
    if round_latency_ratio:
        e2_lat = float(round(e2_lat))
    e2_bw = bw_fh / bw_nv
    return SpeedupReport(e1_lat, e1_bw, e2_lat, e2_bw, e1_lat * e2_lat, e1_bw * e2_bw)


SWEEP_COLUMNS = ("fabric", "kind", "participants", "payload_bytes", "time_ns")


def sweep_collectives(fabrics: Sequence[Tuple[str, FabricSpec]], kinds: Iterable[CollectiveKind],
                      payloads: Iterable[int], participants: Iterable[int]) -> List[dict]:
    """Tabulate collective times over a grid, for fabric crossover plots."""
    kinds, payloads, participants = list(kinds), list(payloads), list(participants)
    rows = []
    for name, fabric in fabrics:
        for kind in kinds:
            for n in participants:
                for size in payloads:
                    ps = collective_time(CollectiveRequest(kind, size, n), fabric)
                    rows.append({
                        "fabric": name,
                        "kind": CollectiveKind(kind).value,
                        "participants": n,
                        "payload_bytes": size,
                        "time_ns": f"{ps / 1000:.3f}",
                    })
    return rows


def write_sweep_csv(rows: Sequence[dict], path: Optional[Union[str, Path]] = None) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
