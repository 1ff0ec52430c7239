"""Discrete-event simulator and cost model for LLM inference on a
disaggregated shared-memory accelerator system (TAB fabric with remote
memory), compared against an NVLink ring baseline."""

from .comm import (
    CollectiveKind,
    CollectiveRequest,
    SpeedupReport,
    collective_time_nvlink,
    collective_time_tab,
    collective_traffic,
    speedup_decomposition,
)
from .config import hardware_preset, load_toml, model_preset
from .exceptions import (
    ConfigError,
    CycleError,
    DanglingDependencyError,
    DeadlockError,
    FabricMismatchError,
    GraphError,
    PresetNotFoundError,
    ShardingError,
    TabsimError,
    TraceFormatError,
)
from .hardware import (
    BandwidthEfficiency,
    FabricKind,
    FabricSpec,
    HardwareConfig,
    PrimitiveOp,
    XpuSpec,
    mfu_at,
    primitive_latency,
)
from .scenario import ComparisonReport, Scenario, emit_report, load_scenario, run_scenario
from .sim import PrefetchPolicy, SimReport, derive_metrics, discover_local_capacity, prefetch_overhead, simulate
from .workload import (
    ModelSpec,
    OperatorGraph,
    OpKind,
    OpNode,
    Phase,
    TaskSpec,
    TensorClass,
    TensorDesc,
    build_graph,
    export_trace,
    import_trace,
    kv_cache_bytes,
    op_compute_time,
)

__all__ = [
    "BandwidthEfficiency", "CollectiveKind", "CollectiveRequest", "ComparisonReport", "ConfigError",
    "CycleError", "DanglingDependencyError", "DeadlockError", "FabricKind", "FabricMismatchError",
    "FabricSpec", "GraphError", "HardwareConfig", "ModelSpec", "OpKind", "OpNode", "OperatorGraph", "Phase",
    "PrefetchPolicy", "PresetNotFoundError", "PrimitiveOp", "Scenario", "ShardingError", "SimReport",
    "SpeedupReport", "TabsimError", "TaskSpec", "TensorClass", "TensorDesc", "TraceFormatError", "XpuSpec",
    "build_graph", "collective_time_nvlink", "collective_time_tab", "collective_traffic", "derive_metrics",
    "discover_local_capacity", "emit_report", "export_trace", "hardware_preset", "import_trace",
    "kv_cache_bytes", "load_scenario", "load_toml", "mfu_at", "model_preset", "op_compute_time",
    "prefetch_overhead", "primitive_latency", "run_scenario", "simulate", "speedup_decomposition",
]

__version__ = "0.1.0"
