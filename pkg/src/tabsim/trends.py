"""Model-versus-hardware ratio calculators.

Hardware ratios come from public spec sheets shipped in ``data/hardware_sheets.toml``;
model ratios are computed from the operator graphs of :mod:`tabsim.workload`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional

from .comm import CollectiveKind
from .config import hardware_sheet_table
from .exceptions import ConfigError
from .workload import ModelSpec, OperatorGraph, Phase, TaskSpec, build_graph, kv_cache_bytes


@dataclass(frozen=True)
class HardwareSheet:
    name: str
    fp16_flops: float
    hbm_capacity: float  # bytes
    hbm_bandwidth: float  # bytes/s
    interconnect_bandwidth: float  # bits/s
    source: str = ""

    def __post_init__(self):
        if min(self.fp16_flops, self.hbm_capacity, self.hbm_bandwidth, self.interconnect_bandwidth) <= 0:
            raise ConfigError(f"hardware sheet {self.name!r}: all figures must be positive")


def hardware_sheets() -> Dict[str, HardwareSheet]:
    out = {}
    for name, t in hardware_sheet_table().items():
        out[name] = HardwareSheet(
            name=name,
            fp16_flops=float(t["fp16_flops"]),
            hbm_capacity=float(t["hbm_capacity_bytes"]),
            hbm_bandwidth=float(t["hbm_bandwidth_bytes_per_s"]),
            interconnect_bandwidth=float(t["interconnect_bandwidth_bits_per_s"]),
            source=t.get("source", ""),
        )
    return out


def flops_per_gb(hw: HardwareSheet) -> float:
    """FLOP/s per GB (1e9 bytes) of HBM capacity."""
    return hw.fp16_flops / (hw.hbm_capacity / 1e9)


def hardware_byte_per_flop(hw: HardwareSheet) -> float:
    return hw.hbm_bandwidth / hw.fp16_flops


def flops_per_gbps(hw: HardwareSheet) -> float:
    """FLOP/s per Gbit/s of interconnect bandwidth."""
    return hw.fp16_flops / (hw.interconnect_bandwidth / 1e9)


def growth(metric, old: HardwareSheet, new: HardwareSheet) -> float:
    return metric(new) / metric(old)


def graph_byte_per_flop(graph: OperatorGraph) -> float:
    flops = graph.total_flops
    if flops == 0:
        raise ValueError("graph has no FLOPs")
    return graph.total_bytes / flops


def byte_per_flop(model: ModelSpec, task: TaskSpec, phase: Phase, parallelism: int = 1, **kw) -> float:
    """Local-memory bytes touched per FLOP over one phase graph."""
    return graph_byte_per_flop(build_graph(model, task, phase, parallelism, **kw))


def collective_logical_bytes(graph: OperatorGraph) -> int:
    """Bytes handed to collectives, summed over the group.

    AllReduce/ReduceScatter count the tensor once; AllGather and AllToAll
    count every member's contribution.
    """
    total = 0
    for op in graph.collectives():
        c = op.collective
        if c.kind in (CollectiveKind.ALL_REDUCE, CollectiveKind.REDUCE_SCATTER, CollectiveKind.P2P):
            total += c.payload_per_gpu
        else:
            total += c.participants * c.payload_per_gpu
    return total


def model_flops_per_comm_byte(model: ModelSpec, task: TaskSpec, phase: Optional[Phase] = None,
                              parallelism: int = 8, **kw) -> float:
    """Model FLOPs across all xPUs per byte moved by collectives."""
    if parallelism < 2:
        raise ValueError("communication needs parallelism >= 2")
    g = build_graph(model, task, phase or Phase.decode(), parallelism, **kw)
    comm = collective_logical_bytes(g)
    return g.total_flops * parallelism / comm


HARDWARE_TREND_COLUMNS = ("name", "fp16_flops", "hbm_capacity_bytes", "hbm_bandwidth_bytes_per_s",
                          "interconnect_bandwidth_bits_per_s", "flops_per_gb", "byte_per_flop",
                          "flops_per_gbps")


def hardware_trend_rows(sheets: Iterable[HardwareSheet]) -> List[dict]:
    rows = []
    for s in sheets:
        rows.append({
            "name": s.name,
            "fp16_flops": f"{s.fp16_flops:.6g}",
            "hbm_capacity_bytes": f"{s.hbm_capacity:.6g}",
            "hbm_bandwidth_bytes_per_s": f"{s.hbm_bandwidth:.6g}",
            "interconnect_bandwidth_bits_per_s": f"{s.interconnect_bandwidth:.6g}",
            "flops_per_gb": f"{flops_per_gb(s):.6g}",
            "byte_per_flop": f"{hardware_byte_per_flop(s):.6g}",
            "flops_per_gbps": f"{flops_per_gbps(s):.6g}",
        })
    return rows


MODEL_TREND_COLUMNS = ("model", "weight_bytes", "kv_bytes_per_token", "prefill_byte_per_flop",
                       "decode_byte_per_flop", "decode_to_prefill", "flops_per_comm_byte")


def model_trend_rows(models: Iterable[ModelSpec], task: TaskSpec, parallelism: int = 8) -> List[dict]:
    rows = []
    for m in models:
        pre = byte_per_flop(m, task, Phase.prefill(), parallelism)
        dec = byte_per_flop(m, task, Phase.decode(), parallelism)
        rows.append({
            "model": m.name,
            "weight_bytes": m.weight_bytes(),
            "kv_bytes_per_token": f"{kv_cache_bytes(m, 1, 1):.6g}",
            "prefill_byte_per_flop": f"{pre:.6g}",
            "decode_byte_per_flop": f"{dec:.6g}",
            "decode_to_prefill": f"{dec / pre:.6g}",
            "flops_per_comm_byte": f"{model_flops_per_comm_byte(m, task, Phase.decode(), parallelism):.6g}",
        })
    return rows
