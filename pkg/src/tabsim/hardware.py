"""Hardware descriptions and the primitive-operation latency model.

All durations returned from this module are integer picoseconds.  Bandwidths
are bytes per second (powers of ten), capacities are bytes (presets use
powers of two, e.g. ``144 * GiB``).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Optional, Tuple

import numpy as np

from .exceptions import ConfigError, FabricMismatchError

PS_PER_NS = 1_000
PS_PER_US = 1_000_000
PS_PER_MS = 1_000_000_000
PS_PER_S = 1_000_000_000_000

KiB = 1 << 10
MiB = 1 << 20
GiB = 1 << 30
GB = 10**9
TB = 10**12


def ns_to_ps(ns: float) -> int:
    return int(round(ns * PS_PER_NS))


def ps_to_ns(ps: int) -> float:
    return ps / PS_PER_NS


def ps_to_ms(ps: int) -> float:
    return ps / PS_PER_MS


def transfer_ps(size: int, bandwidth: float, efficiency: float = 1.0) -> int:
    """Time to stream ``size`` bytes at ``bandwidth * efficiency``, rounded up to a picosecond.

    The quotient is evaluated exactly (floats are converted to rationals), so the
    result is reproducible bit for bit.
    """
    if size <= 0:
        return 0
    if efficiency == 1.0 and float(bandwidth).is_integer():
        return -(-size * PS_PER_S // int(bandwidth))
    q = Fraction(size * PS_PER_S) / (Fraction(bandwidth) * Fraction(efficiency))
    return math.ceil(q)


class FabricKind(str, Enum):
    NVLINK_RING = "nvlink_ring"
    TAB_SHARED_MEMORY = "tab_shared_memory"


class PrimitiveOp(str, Enum):
    READ = "read"
    WRITE = "write"
    WRITE_ACCUMULATE = "write_accumulate"
    NOTIFICATION = "notification"


@dataclass(frozen=True)
class BandwidthEfficiency:
    """Fraction of nominal bandwidth achieved by a transfer of a given size.

    Piecewise linear in ``log2(size)`` between knots, clamped outside them.
    """

    knots: Tuple[Tuple[int, float], ...]

    def __post_init__(self):
        knots = tuple((int(s), float(f)) for s, f in self.knots)
        if not knots:
            raise ConfigError("efficiency curve needs at least one knot")
        sizes = [s for s, _ in knots]
        fracs = [f for _, f in knots]
        if any(s <= 0 for s in sizes) or any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ConfigError("efficiency knots must have strictly increasing positive sizes")
        if any(not (0.0 < f <= 1.0) for f in fracs):
            raise ConfigError("efficiency fractions must lie in (0, 1]")
        if any(b < a for a, b in zip(fracs, fracs[1:])):
            raise ConfigError("efficiency must be non-decreasing in transfer size")
        object.__setattr__(self, "knots", knots)

    @classmethod
    def constant(cls, value: float = 1.0) -> "BandwidthEfficiency":
        return cls(((1, value),))

    @classmethod
    def default(cls) -> "BandwidthEfficiency":
        return cls(((4 * KiB, 0.25), (64 * MiB, 0.95)))

    @property
    def is_constant(self) -> bool:
        return len(self.knots) == 1 or self.knots[0][1] == self.knots[-1][1]

    def __call__(self, size: int) -> float:
        first_size, first = self.knots[0]
        last_size, last = self.knots[-1]
        if size <= first_size:
            return first
        if size >= last_size:
            return last
        xs = np.log2([s for s, _ in self.knots])
        ys = [f for _, f in self.knots]
        return float(np.interp(math.log2(size), xs, ys))


DEFAULT_MFU_CURVE: Tuple[Tuple[int, float], ...] = (
    (1, 0.05),
    (8, 0.25),
    (16, 0.40),
    (64, 0.60),
    (256, 0.75),
)


@dataclass(frozen=True)
class XpuSpec:
    """Per-accelerator compute and local-memory description.

    ``compute_fp16`` is the reference chip's dense FP16 rate; the effective
    rate is ``compute_fp16 * compute_scale``.  ``local_mem_capacity=None``
    means unbounded (capacity-discovery runs).
    """

    compute_fp16: float
    local_mem_bandwidth: float
    local_mem_capacity: Optional[int] = None
    compute_scale: float = 1.0
    mfu_curve: Tuple[Tuple[int, float], ...] = DEFAULT_MFU_CURVE

    def __post_init__(self):
        if self.compute_fp16 <= 0 or self.local_mem_bandwidth <= 0:
            raise ConfigError("compute_fp16 and local_mem_bandwidth must be positive")
        if self.compute_scale <= 0:
            raise ConfigError("compute_scale must be positive")
        if self.local_mem_capacity is not None and self.local_mem_capacity <= 0:
            raise ConfigError("local_mem_capacity must be positive or None (unbounded)")
        curve = tuple((int(b), float(u)) for b, u in self.mfu_curve)
        batches = [b for b, _ in curve]
        if any(b2 <= b1 for b1, b2 in zip(batches, batches[1:])):
            raise ConfigError("mfu_curve batch keys must be strictly increasing")
        if any(not (0.0 < u <= 1.0) for _, u in curve):
            raise ConfigError("mfu_curve utilisation values must lie in (0, 1]")
        object.__setattr__(self, "mfu_curve", curve)

    @property
    def flops(self) -> float:
        return self.compute_fp16 * self.compute_scale


@dataclass(frozen=True)
class FabricSpec:
    """Scale-up fabric: NVLink-style ring or the TAB shared-memory crossbar.

    ``per_gpu_bandwidth`` is the bandwidth used in the latency equations.  For
    the TAB presets that is the 4.0 TB/s effective figure; the 4.8 TB/s
    crossbar peak is kept separately in ``peak_bandwidth`` and is informational.
    """

    kind: FabricKind
    per_gpu_bandwidth: float
    read_latency_ns: float
    write_latency_ns: float
    notification_latency_ns: float = 0.0
    efficiency: BandwidthEfficiency = field(default_factory=BandwidthEfficiency.default)
    peak_bandwidth: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", FabricKind(self.kind))
        if self.per_gpu_bandwidth <= 0:
            raise ConfigError("per_gpu_bandwidth must be positive")
        if min(self.read_latency_ns, self.write_latency_ns, self.notification_latency_ns) < 0:
            raise ConfigError("fabric latencies must be non-negative")

    def with_bandwidth(self, bandwidth: float) -> "FabricSpec":
        return dataclasses.replace(self, per_gpu_bandwidth=bandwidth)

    def with_efficiency(self, efficiency: BandwidthEfficiency) -> "FabricSpec":
        return dataclasses.replace(self, efficiency=efficiency)

    def fixed_latency_ps(self, op: PrimitiveOp) -> int:
        op = PrimitiveOp(op)
        if op is PrimitiveOp.READ:
            return ns_to_ps(self.read_latency_ns)
        if op is PrimitiveOp.NOTIFICATION:
            return ns_to_ps(self.notification_latency_ns)
        if op is PrimitiveOp.WRITE_ACCUMULATE and self.kind is FabricKind.NVLINK_RING:
            raise FabricMismatchError("write-accumulate (in-memory reduction) is not available on an NVLink ring")
        return ns_to_ps(self.write_latency_ns)

    def stream_ps(self, size: int) -> int:
        """Variable (bandwidth) part of a transfer of ``size`` bytes."""
        if size <= 0:
            return 0
        return transfer_ps(size, self.per_gpu_bandwidth, self.efficiency(size))


@dataclass(frozen=True)
class HardwareConfig:
    name: str
    num_xpus: int
    xpu: XpuSpec
    fabric: FabricSpec
    remote_mem_capacity: Optional[int] = None

    def __post_init__(self):
        if self.num_xpus < 1:
            raise ConfigError("num_xpus must be >= 1")
        has_remote = self.remote_mem_capacity is not None
        is_tab = self.fabric.kind is FabricKind.TAB_SHARED_MEMORY
        if has_remote != is_tab:
            raise ConfigError("remote_mem_capacity must be set exactly when the fabric is TAB shared memory")

    @property
    def has_remote_memory(self) -> bool:
        return self.fabric.kind is FabricKind.TAB_SHARED_MEMORY

    def with_remote_bandwidth(self, bandwidth: float) -> "HardwareConfig":
        return dataclasses.replace(self, fabric=self.fabric.with_bandwidth(bandwidth))

    def with_efficiency(self, efficiency: BandwidthEfficiency) -> "HardwareConfig":
        return dataclasses.replace(self, fabric=self.fabric.with_efficiency(efficiency))

    def with_local_capacity(self, capacity: Optional[int]) -> "HardwareConfig":
        return dataclasses.replace(self, xpu=dataclasses.replace(self.xpu, local_mem_capacity=capacity))


def primitive_latency(op_kind: PrimitiveOp, data_size: int, fabric: FabricSpec) -> int:
    """Latency of one primitive fabric operation in picoseconds.

    fixed latency + data_size / (bandwidth * efficiency(data_size)).  A
    notification carries no payload, so ``data_size`` is ignored for it.
    """
    op_kind = PrimitiveOp(op_kind)
    if data_size < 0:
        raise ValueError("data_size must be non-negative")
    fixed = fabric.fixed_latency_ps(op_kind)
    if op_kind is PrimitiveOp.NOTIFICATION:
        return fixed
    return fixed + fabric.stream_ps(data_size)


def mfu_at(batch: int, spec: XpuSpec) -> float:
    """Model FLOPs utilisation at ``batch`` rows, interpolated on the spec's curve."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if not spec.mfu_curve:
        raise ConfigError("empty MFU curve")
    xs = [b for b, _ in spec.mfu_curve]
    ys = [u for _, u in spec.mfu_curve]
    return float(np.interp(batch, xs, ys))


# Table-derived constants, used by the presets.
H200_FP16_FLOPS = 989.4e12
H200_HBM_BANDWIDTH = 4.8 * TB
TAB_READ_NS = 220.0
TAB_WRITE_NS = 90.0
TAB_NOTIFY_NS = 40.0
NVLINK4_BANDWIDTH = 450 * GB
NVLINK4_READ_NS = 1000.0
NVLINK4_WRITE_NS = 500.0


def nvlink_fabric(bandwidth: float = NVLINK4_BANDWIDTH, efficiency: Optional[BandwidthEfficiency] = None) -> FabricSpec:
    return FabricSpec(
        kind=FabricKind.NVLINK_RING,
        per_gpu_bandwidth=bandwidth,
        read_latency_ns=NVLINK4_READ_NS,
        write_latency_ns=NVLINK4_WRITE_NS,
        notification_latency_ns=0.0,
        efficiency=efficiency or BandwidthEfficiency.default(),
    )


def tab_fabric(bandwidth: float = 4.0 * TB, efficiency: Optional[BandwidthEfficiency] = None) -> FabricSpec:
    return FabricSpec(
        kind=FabricKind.TAB_SHARED_MEMORY,
        per_gpu_bandwidth=bandwidth,
        read_latency_ns=TAB_READ_NS,
        write_latency_ns=TAB_WRITE_NS,
        notification_latency_ns=TAB_NOTIFY_NS,
        efficiency=efficiency or BandwidthEfficiency.default(),
        peak_bandwidth=4.8 * TB,
    )
