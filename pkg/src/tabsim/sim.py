"""Discrete-event simulation of one xPU running an operator graph.

Two streams run side by side.  The regular stream executes ops as soon as
their dependencies have finished and every tensor they touch is local.  The
paging stream moves tensors between remote and local memory: when op ``i``
starts it prefetches the working sets of ops ``i+1 .. i+w``.  Remote traffic
uses two independent links (read and write direction); transfers on the same
link share its bandwidth equally (processor sharing) unless FIFO is selected.

Times are integer picoseconds.  Events are ordered by ``(time, sequence)``
so runs are bit-for-bit reproducible.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

from .comm import collective_time, tab_plan
from .exceptions import ConfigError, DeadlockError
from .hardware import (
    BandwidthEfficiency,
    HardwareConfig,
    PrimitiveOp,
    ns_to_ps,
    transfer_ps,
)
from .workload import OperatorGraph, OpKind, TaskSpec, op_compute_time


class Eviction(str, Enum):
    NEXT_USE_DISTANCE = "next_use_distance"
    IMMEDIATE = "immediate"


class Arbitration(str, Enum):
    PROCESSOR_SHARING = "processor_sharing"
    FIFO = "fifo"


@dataclass(frozen=True)
class PrefetchPolicy:
    """Paging-stream configuration.

    ``collective_overlap`` lets an op that follows a TAB collective start as
    soon as the completion notification arrives; the read-back still occupies
    the read link.
    """

    window: int = 1
    eviction: Eviction = Eviction.NEXT_USE_DISTANCE
    arbitration: Arbitration = Arbitration.PROCESSOR_SHARING
    collective_overlap: bool = False

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("prefetch window must be >= 1")
        object.__setattr__(self, "eviction", Eviction(self.eviction))
        object.__setattr__(self, "arbitration", Arbitration(self.arbitration))

    def as_dict(self) -> dict:
        return {
            "window": self.window,
            "eviction": self.eviction.value,
            "arbitration": self.arbitration.value,
            "collective_overlap": self.collective_overlap,
        }


@dataclass(frozen=True)
class OpRecord:
    id: int
    name: str
    kind: str
    ready_ps: int
    start_ps: int
    end_ps: int

    @property
    def stall_ps(self) -> int:
        return self.start_ps - self.ready_ps


@dataclass(frozen=True)
class TransferRecord:
    """One remote-memory transfer.  ``what`` is prefetch, writeback, evict,
    collective_write or collective_read."""

    what: str
    subject: str
    bytes: int
    issue_ps: int
    end_ps: int


@dataclass(frozen=True)
class SimReport:
    """Result of one phase simulation, or of :func:`derive_metrics` over two.

    For a phase report ``e2e_ps`` is the makespan.  ``ttft_ps``/``tpot_ps``
    are set only on derived (whole-request) reports.
    """

    config_key: str
    e2e_ps: int
    peak_local_bytes: int
    total_remote_read_bytes: int
    total_remote_write_bytes: int
    collective_read_bytes: int = 0
    collective_write_bytes: int = 0
    ops: Tuple[OpRecord, ...] = ()
    transfers: Tuple[TransferRecord, ...] = ()
    ttft_ps: Optional[int] = None
    tpot_ps: Optional[int] = None
    graph_name: str = ""

    @property
    def makespan_ps(self) -> int:
        return self.e2e_ps

    @property
    def total_stall_ps(self) -> int:
        return sum(r.stall_ps for r in self.ops)

    def op(self, op_id: int) -> OpRecord:
        for r in self.ops:
            if r.id == op_id:
                return r
        raise KeyError(op_id)

    def prefetches(self) -> List[TransferRecord]:
        return [t for t in self.transfers if t.what == "prefetch"]


# --------------------------------------------------------------------------


def prefetch_overhead(size: int, remote_bw: float, efficiency_curve: Optional[BandwidthEfficiency] = None,
                      read_latency_ns: float = 220.0) -> int:
    """Fixed read latency + size / (remote_bw * efficiency(size)), in picoseconds."""
    if size < 0:
        raise ValueError("size must be >= 0")
    curve = efficiency_curve or BandwidthEfficiency.default()
    fixed = ns_to_ps(read_latency_ns)
    if size == 0:
        return fixed
    return fixed + transfer_ps(size, remote_bw, curve(size))


_REMOTE, _INFLIGHT, _LOCAL = 0, 1, 2

# event kinds, in the order they are processed at equal (time, seq) never matters
_EV_OP_DONE = "op_done"
_EV_XFER_START = "xfer_start"
_EV_LINK = "link"
_EV_NOTIFY = "notify"
_EV_FIFO_DONE = "fifo_done"

_EPS = 1e-3  # sub-picosecond slack for float processor-sharing arithmetic


@dataclass
class _Transfer:
    xid: int
    what: str
    subject: str
    size: int
    fixed_ps: int
    work_ps: int
    issue_ps: int
    op_pos: Optional[int] = None


class _Link:
    def __init__(self):
        self.active: Dict[int, float] = {}
        self.last = 0
        self.version = 0
        self.busy_until = 0

    def advance(self, now: int):
        if self.active and now > self.last:
            dec = (now - self.last) / len(self.active)
            for x in self.active:
                self.active[x] -= dec
        self.last = now

    def next_event(self, now: int) -> Optional[int]:
        if not self.active:
            return None
        rem = min(self.active.values())
        return now + max(0, math.ceil(rem * len(self.active) - _EPS))


class _Engine:
    def __init__(self, graph: OperatorGraph, hw: HardwareConfig, policy: PrefetchPolicy,
                 pre_resident: Optional[bool]):
        self.g = graph
        self.hw = hw
        self.policy = policy
        self.fabric = hw.fabric
        self.cap = hw.xpu.local_mem_capacity
        self.remote = hw.has_remote_memory
        self.pre_resident = (not self.remote) if pre_resident is None else pre_resident
        self.fifo = policy.arbitration is Arbitration.FIFO

        ops = graph.ops
        self.n = len(ops)
        self.pos = graph.position
        self.tmap = graph.tensor_map
        self.produced = {t for op in ops for t in op.outputs}
        self.users: Dict[str, List[int]] = {}
        for p, op in enumerate(ops):
            for t in set(op.weight_tensors + op.inputs + op.outputs):
                self.users.setdefault(t, []).append(p)
        self.uses_left = {t: len(ps) for t, ps in self.users.items()}
        self.children: List[List[int]] = [[] for _ in ops]
        self.deps_left = [0] * self.n
        for p, op in enumerate(ops):
            ds = {self.pos[d] for d in op.deps}
            self.deps_left[p] = len(ds)
            for d in ds:
                self.children[d].append(p)

        self.state: Dict[str, int] = {}
        self.dirty: set = set()
        self.requested: set = set()
        self.used = 0
        self.peak = 0
        self.time = 0
        self.seq = 0
        self.heap: list = []
        self.links = {"read": _Link(), "write": _Link()}
        self.xfers: Dict[int, _Transfer] = {}
        self.link_of: Dict[int, str] = {}
        self.next_xid = 0
        self.pending: list = []  # (op_pos, seq, tensor) prefetches waiting for room

        self.ready_time = [None] * self.n
        self.start_time = [None] * self.n
        self.end_time = [None] * self.n
        self.running: set = set()
        self.dep_ready: List[int] = []  # positions whose deps are done, not yet started (heap)
        self.done = 0
        self.records: List[TransferRecord] = []
        self.read_bytes = self.write_bytes = 0
        self.coll_read = self.coll_write = 0

    # -- bookkeeping -------------------------------------------------------

    def push(self, t: int, kind: str, payload):
        heapq.heappush(self.heap, (t, self.seq, kind, payload))
        self.seq += 1

    def alloc(self, size: int):
        self.used += size
        if self.used > self.peak:
            self.peak = self.used

    def free(self, tid: str):
        self.used -= self.tmap[tid].size
        self.state[tid] = _REMOTE

    def fits(self, size: int) -> bool:
        return self.cap is None or self.used + size <= self.cap

    def next_use(self, tid: str) -> int:
        for p in self.users[tid]:
            if self.end_time[p] is None:
                return p
        return self.n + 1

    def pinned(self, tid: str) -> bool:
        return any(self.end_time[p] is None and self.start_time[p] is not None for p in self.users[tid])

    def make_room(self, size: int, for_pos: int) -> bool:
        """Evict farthest-next-use local pageable tensors until ``size`` fits."""
        if self.fits(size):
            return True
        if self.policy.eviction is Eviction.IMMEDIATE:
            return False
        victims = []
        for tid, st in self.state.items():
            if st != _LOCAL or not self.tmap[tid].pageable or self.pinned(tid):
                continue
            nu = self.next_use(tid)
            if nu > for_pos:
                victims.append((-nu, tid))
        victims.sort()
        freed_now = 0
        chosen = []
        need = self.used + size - self.cap
        for _, tid in victims:
            if freed_now >= need:
                break
            chosen.append(tid)
            freed_now += self.tmap[tid].size
        if freed_now < need:
            return False
        for tid in chosen:
            self.evict(tid)
        return self.fits(size)

    def evict(self, tid: str):
        if tid in self.dirty:
            # the local copy is released once the write completes
            self.dirty.discard(tid)
            self.state[tid] = _INFLIGHT
            self.start_transfer("write", "evict", tid, self.tmap[tid].size, PrimitiveOp.WRITE)
            return
        self.free(tid)
        self.requested.discard(tid)

    # -- transfers ---------------------------------------------------------

    def start_transfer(self, link: str, what: str, subject: str, size: int, prim: PrimitiveOp,
                       op_pos: Optional[int] = None):
        xid = self.next_xid
        self.next_xid += 1
        fixed = self.fabric.fixed_latency_ps(prim)
        x = _Transfer(xid, what, subject, size, fixed, self.fabric.stream_ps(size), self.time, op_pos)
        self.xfers[xid] = x
        self.link_of[xid] = link
        if self.fifo:
            lk = self.links[link]
            begin = max(self.time, lk.busy_until)
            lk.busy_until = begin + fixed + x.work_ps
            self.push(lk.busy_until, _EV_FIFO_DONE, xid)
        elif fixed:
            self.push(self.time + fixed, _EV_XFER_START, xid)
        else:
            self.join_link(xid)

    def join_link(self, xid: int):
        lk = self.links[self.link_of[xid]]
        x = self.xfers[xid]
        if x.work_ps == 0:
            self.finish_transfer(xid)
            return
        lk.advance(self.time)
        lk.active[xid] = float(x.work_ps)
        self.reschedule(self.link_of[xid])

    def reschedule(self, link: str):
        lk = self.links[link]
        lk.version += 1
        t = lk.next_event(self.time)
        if t is not None:
            self.push(t, _EV_LINK, (link, lk.version))

    def on_link(self, link: str, version: int):
        lk = self.links[link]
        if version != lk.version:
            return
        lk.advance(self.time)
        finished = sorted(x for x, rem in lk.active.items() if rem <= _EPS)
        for x in finished:
            del lk.active[x]
        self.reschedule(link)
        for x in finished:
            self.finish_transfer(x)

    def finish_transfer(self, xid: int):
        x = self.xfers.pop(xid)
        self.link_of.pop(xid)
        self.records.append(TransferRecord(x.what, x.subject, x.size, x.issue_ps, self.time))
        if x.what == "prefetch":
            self.read_bytes += x.size
            self.state[x.subject] = _LOCAL
        elif x.what in ("writeback", "evict"):
            self.write_bytes += x.size
            self.free(x.subject)
            if x.what == "evict":
                self.requested.discard(x.subject)
            self.drain_pending()
        elif x.what == "collective_write":
            self.coll_write += x.size
            notify = self.fabric.fixed_latency_ps(PrimitiveOp.NOTIFICATION)
            self.push(self.time + notify, _EV_NOTIFY, x.op_pos)
        elif x.what == "collective_read":
            self.coll_read += x.size
            if not self.policy.collective_overlap:
                self.complete_op(x.op_pos)

    # -- paging ------------------------------------------------------------

    def source_tensors(self, p: int):
        return [t for t in self.g.ops[p].weight_tensors if t not in self.produced]

    def request(self, tid: str, for_pos: int):
        if self.state.get(tid, _REMOTE) != _REMOTE or tid in self.requested:
            return
        self.requested.add(tid)
        size = self.tmap[tid].size
        if self.make_room(size, for_pos):
            self.issue(tid)
        else:
            heapq.heappush(self.pending, (for_pos, self.seq, tid))
            self.seq += 1

    def issue(self, tid: str):
        self.alloc(self.tmap[tid].size)
        self.state[tid] = _INFLIGHT
        self.start_transfer("read", "prefetch", tid, self.tmap[tid].size, PrimitiveOp.READ)

    def drain_pending(self):
        while self.pending:
            for_pos, _, tid = self.pending[0]
            if self.state.get(tid, _REMOTE) != _REMOTE:
                heapq.heappop(self.pending)
                continue
            if not self.make_room(self.tmap[tid].size, for_pos):
                break
            heapq.heappop(self.pending)
            self.issue(tid)

    def prefetch_window(self, after: int):
        for p in range(after + 1, min(self.n, after + 1 + self.policy.window)):
            for t in self.source_tensors(p):
                self.request(t, p)

    # -- regular stream ----------------------------------------------------

    def try_start(self):
        progress = True
        while progress:
            progress = False
            waiting = sorted(self.dep_ready)
            for p in waiting:
                if self.can_start(p):
                    self.dep_ready.remove(p)
                    self.start_op(p)
                    progress = True

    def can_start(self, p: int) -> bool:
        op = self.g.ops[p]
        missing = False
        for t in op.weight_tensors + op.inputs:
            st = self.state.get(t, _REMOTE)
            if st != _LOCAL:
                missing = True
                if st == _REMOTE and t not in self.produced:
                    self.request(t, p)
        if missing:
            return False
        new = sum(self.tmap[t].size for t in op.outputs if self.state.get(t, _REMOTE) == _REMOTE)
        return self.make_room(new, p)

    def start_op(self, p: int):
        op = self.g.ops[p]
        self.start_time[p] = self.time
        self.running.add(p)
        for t in op.outputs:
            if self.state.get(t, _REMOTE) == _REMOTE:
                self.alloc(self.tmap[t].size)
                self.state[t] = _LOCAL
                if self.tmap[t].writeback and self.remote:
                    self.dirty.add(t)
        if not self.pre_resident:
            self.prefetch_window(p)
        if op.kind is OpKind.COLLECTIVE and self.remote:
            write, _, _ = tab_plan(op.collective)
            self.start_transfer("write", "collective_write", op.name, write.size, write.op, op_pos=p)
        elif op.kind is OpKind.COLLECTIVE:
            self.push(self.time + collective_time(op.collective, self.fabric), _EV_OP_DONE, p)
        else:
            self.push(self.time + op_compute_time(op, self.hw.xpu, op.tokens), _EV_OP_DONE, p)

    def on_notify(self, p: int):
        _, _, read = tab_plan(self.g.ops[p].collective)
        self.start_transfer("read", "collective_read", self.g.ops[p].name, read.size, read.op, op_pos=p)
        if self.policy.collective_overlap:
            self.complete_op(p)

    def complete_op(self, p: int):
        op = self.g.ops[p]
        self.end_time[p] = self.time
        self.running.discard(p)
        self.done += 1
        for t in set(op.weight_tensors + op.inputs + op.outputs):
            self.uses_left[t] -= 1
            if self.uses_left[t] == 0:
                self.release(t)
            elif (self.policy.eviction is Eviction.IMMEDIATE and self.tmap[t].pageable
                  and t not in self.produced and self.state.get(t) == _LOCAL and not self.pinned(t)):
                self.free(t)
                self.requested.discard(t)
        for c in self.children[p]:
            self.deps_left[c] -= 1
            if self.deps_left[c] == 0:
                self.mark_ready(c)
        self.drain_pending()

    def release(self, tid: str):
        if self.state.get(tid) != _LOCAL:
            return
        if tid in self.dirty:
            self.dirty.discard(tid)
            self.state[tid] = _INFLIGHT
            self.start_transfer("write", "writeback", tid, self.tmap[tid].size, PrimitiveOp.WRITE)
        else:
            self.free(tid)

    def mark_ready(self, p: int):
        self.ready_time[p] = self.time
        self.dep_ready.append(p)

    # -- main loop ---------------------------------------------------------

    def check_working_sets(self):
        if self.cap is None:
            return
        for op in self.g.ops:
            ws = set(op.weight_tensors + op.inputs + op.outputs)
            need = sum(self.tmap[t].size for t in ws)
            if need > self.cap:
                raise DeadlockError(
                    f"op {op.id} ({op.name}) needs {need} bytes resident but local capacity is {self.cap}",
                    op.id, op.name)

    def run(self) -> SimReport:
        self.check_working_sets()
        # Graph inputs nobody produces and pre-resident tensors start local.
        for tid, t in self.tmap.items():
            if tid in self.produced:
                continue
            if not t.pageable or self.pre_resident:
                self.alloc(t.size)
                self.state[tid] = _LOCAL
        if self.cap is not None and self.used > self.cap:
            raise ConfigError(f"{self.used} bytes of resident tensors exceed local capacity {self.cap}")
        if not self.pre_resident:
            self.prefetch_window(-1)
        for p in range(self.n):
            if self.deps_left[p] == 0:
                self.mark_ready(p)
        self.try_start()
        while self.heap:
            t, _, kind, payload = heapq.heappop(self.heap)
            self.time = t
            if kind == _EV_OP_DONE:
                self.complete_op(payload)
            elif kind == _EV_LINK:
                self.on_link(*payload)
            elif kind == _EV_XFER_START:
                self.join_link(payload)
            elif kind == _EV_FIFO_DONE:
                self.finish_transfer(payload)
            elif kind == _EV_NOTIFY:
                self.on_notify(payload)
            self.try_start()
        if self.done != self.n:
            blocked = min(p for p in range(self.n) if self.start_time[p] is None)
            op = self.g.ops[blocked]
            raise DeadlockError(
                f"simulation stalled: op {op.id} ({op.name}) cannot get its tensors into "
                f"{self.cap} bytes of local memory", op.id, op.name)
        records = tuple(
            OpRecord(op.id, op.name, op.kind.value, self.ready_time[p], self.start_time[p], self.end_time[p])
            for p, op in enumerate(self.g.ops)
        )
        makespan = max((r.end_ps for r in records), default=0)
        return SimReport(
            config_key=config_key(self.g, self.hw, self.policy),
            e2e_ps=makespan,
            peak_local_bytes=self.peak,
            total_remote_read_bytes=self.read_bytes,
            total_remote_write_bytes=self.write_bytes,
            collective_read_bytes=self.coll_read,
            collective_write_bytes=self.coll_write,
            ops=records,
            transfers=tuple(self.records),
            graph_name=self.g.name,
        )


def config_key(graph: OperatorGraph, hw: HardwareConfig, policy: PrefetchPolicy) -> str:
    """Identity of everything but the phase, used to pair prefill and decode reports."""
    meta = {k: v for k, v in graph.meta.items() if k not in ("phase", "q_len", "kv_len")}
    key = {
        "hardware": hw.name,
        "num_xpus": hw.num_xpus,
        "remote_bandwidth": hw.fabric.per_gpu_bandwidth,
        "efficiency": [list(k) for k in hw.fabric.efficiency.knots],
        "policy": policy.as_dict(),
        "workload": meta,
    }
    return json.dumps(key, sort_keys=True)


def simulate(graph: OperatorGraph, hw: HardwareConfig, policy: Optional[PrefetchPolicy] = None, *,
             pre_resident: Optional[bool] = None) -> SimReport:
    """Run ``graph`` on one xPU of ``hw``.

    ``pre_resident`` places every weight and KV tensor in local memory before
    the first op (no paging).  It defaults to True for systems without remote
    memory and False otherwise.
    """
    return _Engine(graph, hw, policy or PrefetchPolicy(), pre_resident).run()


def discover_local_capacity(graph: OperatorGraph, hw: HardwareConfig,
                            policy: Optional[PrefetchPolicy] = None) -> int:
    """Peak local memory of an unbounded-capacity run."""
    return simulate(graph, hw.with_local_capacity(None), policy).peak_local_bytes


def derive_metrics(prefill: SimReport, decode: SimReport, task: TaskSpec) -> SimReport:
    """Combine a prefill and a representative decode step into request-level metrics."""
    if prefill.config_key != decode.config_key:
        raise ConfigError("prefill and decode reports come from different configurations")
    ttft, tpot = prefill.e2e_ps, decode.e2e_ps
    g = task.gen_len
    return SimReport(
        config_key=prefill.config_key,
        e2e_ps=ttft + g * tpot,
        peak_local_bytes=max(prefill.peak_local_bytes, decode.peak_local_bytes),
        total_remote_read_bytes=prefill.total_remote_read_bytes + g * decode.total_remote_read_bytes,
        total_remote_write_bytes=prefill.total_remote_write_bytes + g * decode.total_remote_write_bytes,
        collective_read_bytes=prefill.collective_read_bytes + g * decode.collective_read_bytes,
        collective_write_bytes=prefill.collective_write_bytes + g * decode.collective_write_bytes,
        ttft_ps=ttft,
        tpot_ps=tpot,
    )


def timeline_jsonl(report: SimReport) -> str:
    """One JSON object per line: ops first (execution order), then transfers."""
    lines = []
    for r in report.ops:
        lines.append(json.dumps({"type": "op", "id": r.id, "name": r.name, "kind": r.kind,
                                 "ready_ps": r.ready_ps, "start_ps": r.start_ps, "end_ps": r.end_ps,
                                 "stall_ps": r.stall_ps}, sort_keys=True))
    for t in report.transfers:
        lines.append(json.dumps({"type": "transfer", "what": t.what, "subject": t.subject, "bytes": t.bytes,
                                 "issue_ps": t.issue_ps, "end_ps": t.end_ps}, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


_TRACK = {"prefetch": 1, "collective_read": 1, "writeback": 2, "evict": 2, "collective_write": 2}


def chrome_trace(report: SimReport) -> dict:
    """Chrome trace-event JSON (``chrome://tracing``, Perfetto)."""
    events = [
        {"name": "thread_name", "ph": "M", "pid": 0, "tid": 0, "args": {"name": "regular stream"}},
        {"name": "thread_name", "ph": "M", "pid": 0, "tid": 1, "args": {"name": "paging stream (read)"}},
        {"name": "thread_name", "ph": "M", "pid": 0, "tid": 2, "args": {"name": "paging stream (write)"}},
    ]
    for r in report.ops:
        events.append({"name": r.name, "cat": r.kind, "ph": "X", "pid": 0, "tid": 0,
                       "ts": r.start_ps / 1e6, "dur": (r.end_ps - r.start_ps) / 1e6,
                       "args": {"id": r.id, "stall_us": r.stall_ps / 1e6}})
    for t in report.transfers:
        events.append({"name": t.subject, "cat": t.what, "ph": "X", "pid": 0, "tid": _TRACK[t.what],
                       "ts": t.issue_ps / 1e6, "dur": (t.end_ps - t.issue_ps) / 1e6,
                       "args": {"bytes": t.bytes}})
    return {"traceEvents": events, "displayTimeUnit": "ns"}
