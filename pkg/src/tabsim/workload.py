"""Operator dependency graphs for transformer inference.

A graph describes the work one xPU performs for one phase (prefill, or one
decode step) under tensor/expert parallelism of degree ``N``.  Nodes carry
per-xPU FLOPs and byte counts; tensors carry sizes and their first/last use in
execution order so the simulator can page them.

Graphs can also be loaded from a JSON-lines trace (see :func:`import_trace`).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from .comm import CollectiveKind, CollectiveRequest
from .exceptions import (
    ConfigError,
    CycleError,
    DanglingDependencyError,
    GraphError,
    ShardingError,
    TraceFormatError,
)
from .hardware import PS_PER_S, XpuSpec, mfu_at

TRACE_FORMAT = "tabsim-trace"
TRACE_VERSION = 1

# FLOPs per element for the cheap elementwise/reduction kernels.
NORM_FLOPS_PER_ELEMENT = 5
SAMPLE_FLOPS_PER_ELEMENT = 5


class OpKind(str, Enum):
    GEMM = "gemm"
    ATTENTION = "attention"
    LAYER_NORM = "layer_norm"
    MOE_GATE = "moe_gate"
    EXPERT_FFN = "expert_ffn"
    COLLECTIVE = "collective"
    EMBED = "embed"
    SAMPLE = "sample"


class TensorClass(str, Enum):
    WEIGHT = "weight"
    KV_CACHE = "kv_cache"
    ACTIVATION = "activation"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture constants of a transformer model.

    ``ffn_intermediate`` is the per-expert intermediate size for MoE models.
    ``gated_ffn`` selects a three-matrix (SwiGLU-style) FFN instead of two.
    """

    name: str
    num_layers: int
    hidden_size: int
    num_heads: int
    kv_heads: int
    head_dim: int
    ffn_intermediate: int
    vocab_size: int
    num_experts: int = 1
    experts_per_token: int = 1
    bytes_per_param: int = 2
    kv_compression_factor: float = 1.0
    max_seq_len: int = 4096
    gated_ffn: bool = False
    activation_bytes: int = 2

    def __post_init__(self):
        counts = {
            "num_layers": self.num_layers,
            "hidden_size": self.hidden_size,
            "num_heads": self.num_heads,
            "kv_heads": self.kv_heads,
            "head_dim": self.head_dim,
            "ffn_intermediate": self.ffn_intermediate,
            "vocab_size": self.vocab_size,
            "num_experts": self.num_experts,
            "experts_per_token": self.experts_per_token,
            "bytes_per_param": self.bytes_per_param,
            "max_seq_len": self.max_seq_len,
            "activation_bytes": self.activation_bytes,
        }
        bad = [k for k, v in counts.items() if int(v) != v or v < 1]
        if bad:
            raise ConfigError(f"model {self.name!r}: {', '.join(bad)} must be integers >= 1")
        if self.experts_per_token > self.num_experts:
            raise ConfigError(f"model {self.name!r}: experts_per_token exceeds num_experts")
        if self.kv_compression_factor < 1:
            raise ConfigError(f"model {self.name!r}: kv_compression_factor must be >= 1")

    @property
    def is_moe(self) -> bool:
        return self.num_experts > 1

    @property
    def ffn_matrices(self) -> int:
        return 3 if self.gated_ffn else 2

    def attention_params(self) -> int:
        h, hd = self.hidden_size, self.head_dim
        return h * (self.num_heads + 2 * self.kv_heads) * hd + self.num_heads * hd * h

    def ffn_params(self) -> int:
        expert = self.ffn_matrices * self.hidden_size * self.ffn_intermediate
        gate = self.hidden_size * self.num_experts if self.is_moe else 0
        return expert * self.num_experts + gate

    def param_count(self) -> int:
        norms = 2 * self.hidden_size
        per_layer = self.attention_params() + self.ffn_params() + norms
        embeddings = 2 * self.vocab_size * self.hidden_size + self.hidden_size
        return self.num_layers * per_layer + embeddings

    def weight_bytes(self) -> int:
        return self.param_count() * self.bytes_per_param


@dataclass(frozen=True)
class TaskSpec:
    prompt_len: int
    gen_len: int
    batch: int

    def __post_init__(self):
        if self.prompt_len < 1 or self.gen_len < 0 or self.batch < 1:
            raise ConfigError("task needs prompt_len >= 1, gen_len >= 0, batch >= 1")

    @property
    def representative_step(self) -> int:
        return self.gen_len // 2


@dataclass(frozen=True)
class Phase:
    """Prefill, or one decode step (``step`` counts generated tokens so far)."""

    kind: str
    step: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("prefill", "decode"):
            raise ValueError(f"unknown phase {self.kind!r}")
        if self.kind == "prefill" and self.step is not None:
            raise ValueError("prefill has no step index")
        if self.step is not None and self.step < 0:
            raise ValueError("decode step must be >= 0")

    @classmethod
    def prefill(cls) -> "Phase":
        return cls("prefill")

    @classmethod
    def decode(cls, step: Optional[int] = None) -> "Phase":
        return cls("decode", step)

    @property
    def is_prefill(self) -> bool:
        return self.kind == "prefill"

    def resolved_step(self, task: TaskSpec) -> int:
        return task.representative_step if self.step is None else self.step

    def q_len(self, task: TaskSpec) -> int:
        return task.prompt_len if self.is_prefill else 1

    def kv_len(self, task: TaskSpec) -> int:
        if self.is_prefill:
            return task.prompt_len
        return task.prompt_len + self.resolved_step(task)

    def label(self, task: Optional[TaskSpec] = None) -> str:
        if self.is_prefill:
            return "prefill"
        step = self.step if task is None else self.resolved_step(task)
        return "decode" if step is None else f"decode@{step}"


@dataclass(frozen=True)
class TensorDesc:
    """A tensor the simulator tracks.

    ``writeback`` marks tensors produced during the phase that must reach
    remote memory before their local copy can be dropped (the KV cache).
    ``first_use``/``last_use`` are positions in the graph's execution order.
    """

    id: str
    size: int
    tensor_class: TensorClass
    first_use: int = -1
    last_use: int = -1
    writeback: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tensor_class", TensorClass(self.tensor_class))
        if self.size <= 0:
            raise GraphError(f"tensor {self.id!r} must have positive size")
        if self.first_use > self.last_use:
            raise GraphError(f"tensor {self.id!r}: first_use after last_use")

    @property
    def pageable(self) -> bool:
        return self.tensor_class is not TensorClass.ACTIVATION


@dataclass(frozen=True)
class OpNode:
    """One operator.

    ``weight_tensors`` lists every pageable tensor (weights and KV cache) that
    must be resident before the op starts; ``inputs``/``outputs`` are the
    activation tensors it consumes and produces.  ``tokens`` is the row count
    used to look up MFU.
    """

    id: int
    name: str
    kind: OpKind
    flops: int = 0
    weight_tensors: Tuple[str, ...] = ()
    activation_bytes_in: int = 0
    activation_bytes_out: int = 0
    deps: Tuple[int, ...] = ()
    collective: Optional[CollectiveRequest] = None
    tokens: int = 1
    inputs: Tuple[str, ...] = ()
    outputs: Tuple[str, ...] = ()
    layer: Optional[int] = None
    weight_bytes: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", OpKind(self.kind))
        for name in ("weight_tensors", "deps", "inputs", "outputs"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.flops < 0:
            raise GraphError(f"op {self.id}: negative flops")
        if self.kind is OpKind.COLLECTIVE and self.collective is None:
            raise GraphError(f"op {self.id}: collective op without a CollectiveRequest")
        if self.tokens < 1:
            raise GraphError(f"op {self.id}: tokens must be >= 1")

    @property
    def local_bytes_touched(self) -> int:
        return self.weight_bytes + self.activation_bytes_in + self.activation_bytes_out

    @property
    def working_set(self) -> Tuple[str, ...]:
        return self.weight_tensors + tuple(t for t in self.inputs if t not in self.weight_tensors)


@dataclass(frozen=True)
class OperatorGraph:
    """Validated DAG of ops stored in execution (topological) order."""

    name: str
    ops: Tuple[OpNode, ...]
    tensors: Tuple[TensorDesc, ...] = ()
    meta: Mapping[str, Any] = field(default_factory=dict, hash=False)

    @classmethod
    def build(cls, name: str, ops: Iterable[OpNode], tensors: Iterable[TensorDesc] = (),
              meta: Optional[Mapping[str, Any]] = None) -> "OperatorGraph":
        """Validate ``ops``, order them topologically and fill derived fields.

        Ops may be given in any order; ties in the topological sort keep the
        given order.  Tensor ``first_use``/``last_use`` and op ``weight_bytes``
        are recomputed.
        """
        ops = list(ops)
        tensors = list(tensors)
        by_id: Dict[int, OpNode] = {}
        for op in ops:
            if op.id in by_id:
                raise GraphError(f"duplicate op id {op.id}")
            by_id[op.id] = op
        for op in ops:
            for d in op.deps:
                if d not in by_id:
                    raise DanglingDependencyError(op.id, d)
        order = _topological_order(ops)
        ops = [by_id[i] for i in order]

        tmap: Dict[str, TensorDesc] = {}
        for t in tensors:
            if t.id in tmap:
                raise GraphError(f"duplicate tensor id {t.id!r}")
            tmap[t.id] = t
        first: Dict[str, int] = {}
        last: Dict[str, int] = {}
        filled = []
        for pos, op in enumerate(ops):
            refs = op.weight_tensors + op.inputs + op.outputs
            for tid in refs:
                if tid not in tmap:
                    raise GraphError(f"op {op.id} references unknown tensor {tid!r}")
                first.setdefault(tid, pos)
                last[tid] = pos
            wbytes = sum(tmap[t].size for t in op.weight_tensors)
            a_in = op.activation_bytes_in or sum(tmap[t].size for t in op.inputs)
            a_out = op.activation_bytes_out or sum(tmap[t].size for t in op.outputs)
            filled.append(dataclasses.replace(op, weight_bytes=wbytes, activation_bytes_in=a_in,
                                              activation_bytes_out=a_out))
        out_tensors = []
        for t in tensors:
            if t.id not in first:
                continue
            out_tensors.append(dataclasses.replace(t, first_use=first[t.id], last_use=last[t.id]))
        return cls(name=name, ops=tuple(filled), tensors=tuple(out_tensors), meta=dict(meta or {}))

    @cached_property
    def tensor_map(self) -> Dict[str, TensorDesc]:
        return {t.id: t for t in self.tensors}

    @cached_property
    def position(self) -> Dict[int, int]:
        return {op.id: i for i, op in enumerate(self.ops)}

    def tensor(self, tid: str) -> TensorDesc:
        return self.tensor_map[tid]

    def topological_order(self) -> List[int]:
        return [op.id for op in self.ops]

    def __len__(self):
        return len(self.ops)

    @property
    def total_flops(self) -> int:
        return sum(op.flops for op in self.ops)

    @property
    def total_bytes(self) -> int:
        """Local memory traffic of all non-collective ops."""
        return sum(op.local_bytes_touched for op in self.ops if op.kind is not OpKind.COLLECTIVE)

    def weight_bytes(self, layer: Optional[int] = None) -> int:
        seen = set()
        total = 0
        for op in self.ops:
            if layer is not None and op.layer != layer:
                continue
            for tid in op.weight_tensors:
                t = self.tensor_map[tid]
                if t.tensor_class is TensorClass.WEIGHT and tid not in seen:
                    seen.add(tid)
                    total += t.size
        return total

    def collectives(self) -> List[OpNode]:
        return [op for op in self.ops if op.kind is OpKind.COLLECTIVE]


def _topological_order(ops: Sequence[OpNode]) -> List[int]:
    index = {op.id: i for i, op in enumerate(ops)}
    indeg = {op.id: len(set(op.deps)) for op in ops}
    children: Dict[int, List[int]] = {op.id: [] for op in ops}
    for op in ops:
        for d in sorted(set(op.deps), key=index.get):
            children[d].append(op.id)
    import heapq

    ready = [(index[op.id], op.id) for op in ops if indeg[op.id] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        _, oid = heapq.heappop(ready)
        order.append(oid)
        for c in children[oid]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(ready, (index[c], c))
    if len(order) != len(ops):
        raise CycleError(_find_cycle(ops, set(order)))
    return order


def _find_cycle(ops: Sequence[OpNode], done: set) -> List[int]:
    deps = {op.id: [d for d in op.deps if d not in done] for op in ops if op.id not in done}
    color: Dict[int, int] = {}
    stack: List[int] = []

    def visit(n):
        color[n] = 1
        stack.append(n)
        for d in deps.get(n, ()):
            if color.get(d) == 1:
                return stack[stack.index(d):] + [d]
            if d not in color:
                found = visit(d)
                if found:
                    return found
        stack.pop()
        color[n] = 2
        return None

    for n in deps:
        if n not in color:
            cyc = visit(n)
            if cyc:
                # reported in dependency direction: a depends on b depends on ...
                return cyc
    return sorted(deps)


# ---------------------------------------------------------------------------
# Analytical graph builder
# ---------------------------------------------------------------------------


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def kv_cache_bytes(model: ModelSpec, seq: int, batch: int) -> float:
    """Whole-model KV cache size for ``seq`` tokens of ``batch`` sequences."""
    if seq < 0:
        raise ValueError("seq must be >= 0")
    raw = 2 * model.num_layers * model.kv_heads * model.head_dim * seq * batch * model.bytes_per_param
    if model.kv_compression_factor == 1:
        return float(raw)
    return raw / model.kv_compression_factor


@dataclass(frozen=True)
class Sharding:
    parallelism: int
    heads: int
    kv_heads: int
    moe_mode: Optional[str]
    local_experts: int
    expert_intermediate: int
    ffn_local: int


def plan_sharding(model: ModelSpec, parallelism: int, moe_parallelism: str = "expert") -> Sharding:
    """Per-xPU slice sizes for tensor parallelism (plus expert parallelism for MoE).

    KV heads fewer than ``parallelism`` are replicated when the count divides
    evenly.  Experts are sharded whole across xPUs when ``moe_parallelism`` is
    ``"expert"`` and there are at least as many experts as xPUs; otherwise each
    expert's intermediate dimension is split.
    """
    n = parallelism
    if n < 1:
        raise ShardingError("parallelism must be >= 1")
    if model.num_heads % n:
        raise ShardingError(f"{model.name}: {model.num_heads} heads not divisible by {n}")
    if model.kv_heads % n == 0:
        kv = model.kv_heads // n
    elif n % model.kv_heads == 0:
        kv = 1
    else:
        raise ShardingError(f"{model.name}: {model.kv_heads} KV heads cannot be split over {n}")
    if moe_parallelism not in ("expert", "tensor"):
        raise ConfigError(f"unknown moe_parallelism {moe_parallelism!r}")
    if not model.is_moe:
        if model.ffn_intermediate % n:
            raise ShardingError(f"{model.name}: FFN width {model.ffn_intermediate} not divisible by {n}")
        return Sharding(n, model.num_heads // n, kv, None, 0, 0, model.ffn_intermediate // n)
    if moe_parallelism == "expert" and model.num_experts >= n:
        if model.num_experts % n:
            raise ShardingError(f"{model.name}: {model.num_experts} experts not divisible by {n}")
        return Sharding(n, model.num_heads // n, kv, "expert", model.num_experts // n,
                        model.ffn_intermediate, 0)
    if model.ffn_intermediate % n:
        raise ShardingError(f"{model.name}: expert width {model.ffn_intermediate} not divisible by {n}")
    return Sharding(n, model.num_heads // n, kv, "tensor", model.num_experts,
                    model.ffn_intermediate // n, 0)


class _GraphBuilder:
    def __init__(self):
        self.ops: List[OpNode] = []
        self.tensors: Dict[str, TensorDesc] = {}
        self.producer: Dict[str, int] = {}

    def tensor(self, tid, size, tclass, writeback=False):
        if tid not in self.tensors:
            self.tensors[tid] = TensorDesc(tid, int(size), tclass, writeback=writeback)
        return tid

    def act(self, tid, size):
        return self.tensor(tid, size, TensorClass.ACTIVATION)

    def add(self, name, kind, *, flops=0, weights=(), inputs=(), outputs=(), tokens=1,
            collective=None, layer=None):
        oid = len(self.ops)
        deps = []
        for t in inputs:
            p = self.producer.get(t)
            if p is not None and p not in deps:
                deps.append(p)
        # ops also wait for their predecessor in program order
        if self.ops and oid - 1 not in deps:
            deps.append(oid - 1)
        for t in outputs:
            self.producer[t] = oid
        self.ops.append(OpNode(
            id=oid, name=name, kind=kind, flops=int(flops), weight_tensors=tuple(weights),
            deps=tuple(sorted(deps)), collective=collective, tokens=max(1, int(tokens)),
            inputs=tuple(inputs), outputs=tuple(outputs), layer=layer,
        ))
        return oid


def build_graph(model: ModelSpec, task: TaskSpec, phase: Phase, parallelism: int = 1, *,
                moe_parallelism: str = "expert", expert_granularity: str = "fused") -> OperatorGraph:
    """Per-xPU operator graph for one inference phase.

    Each layer expands to norm -> QKV GEMM -> attention -> output projection ->
    AllReduce -> norm -> FFN.  Dense FFNs are an up and a down GEMM followed by
    an AllReduce.  MoE FFNs are a gate, the expert FFN work and either an
    AllToAll dispatch/combine pair (expert parallel) or an AllReduce (experts
    split by width).

    ``expert_granularity="fused"`` emits one ExpertFfn node per layer whose
    working set is every local expert (one grouped kernel); ``"per_expert"``
    emits one node per local expert.
    """
    if expert_granularity not in ("fused", "per_expert"):
        raise ConfigError(f"unknown expert_granularity {expert_granularity!r}")
    sh = plan_sharding(model, parallelism, moe_parallelism)
    n = parallelism
    h, hd = model.hidden_size, model.head_dim
    bpp, act = model.bytes_per_param, model.activation_bytes
    q_len, kv_len = phase.q_len(task), phase.kv_len(task)
    batch = task.batch
    t = batch * q_len
    k = model.experts_per_token
    qh, kvh = sh.heads, sh.kv_heads
    vocab_local = _ceil_div(model.vocab_size, n)

    def kv_layer_bytes(seq):
        raw = Fraction(2 * kvh * hd * seq * batch * bpp) / Fraction(model.kv_compression_factor)
        return max(1, math.ceil(raw))

    def coll(kind, payload):
        return CollectiveRequest(kind, int(payload), n)

    b = _GraphBuilder()

    # Embedding (vocab-parallel when n > 1).
    b.tensor("embed", vocab_local * h * bpp, TensorClass.WEIGHT)
    if n > 1:
        part = b.act("embed_out", t * h * act)
        b.add("embed", OpKind.EMBED, weights=["embed"], outputs=[part], tokens=t)
        x = b.act("x0", t * h * act)
        b.add("embed.allreduce", OpKind.COLLECTIVE, inputs=[part], outputs=[x],
              collective=coll(CollectiveKind.ALL_REDUCE, t * h * act))
    else:
        x = b.act("x0", t * h * act)
        b.add("embed", OpKind.EMBED, weights=["embed"], outputs=[x], tokens=t)
    residual: Tuple[str, ...] = (x,)

    def norm(name, wid, layer, resid):
        """Norm that also folds in a pending residual add; returns (normed, new residual)."""
        b.tensor(wid, h * bpp, TensorClass.WEIGHT)
        out = b.act(f"{name}_out", t * h * act)
        outs = [out]
        new_resid = resid[0]
        if len(resid) > 1:
            new_resid = b.act(f"{name}_resid", t * h * act)
            outs.append(new_resid)
        b.add(name, OpKind.LAYER_NORM, flops=NORM_FLOPS_PER_ELEMENT * t * h, weights=[wid],
              inputs=list(resid), outputs=outs, tokens=t, layer=layer)
        return out, new_resid

    def reduce_into(name, kind, partials, resid, payload, layer):
        """Collective that combines partial results and the residual stream."""
        if isinstance(partials, str):
            partials = [partials]
        if n == 1:
            return tuple(partials) + (resid,)
        out = b.act(f"{name}_out", t * h * act)
        b.add(name, OpKind.COLLECTIVE, inputs=list(partials) + [resid], outputs=[out],
              collective=coll(kind, payload), layer=layer)
        return (out,)

    for layer in range(model.num_layers):
        p = f"L{layer}"
        ln1, x = norm(f"{p}.ln1", f"{p}.w_ln1", layer, residual)

        qkv_cols = (qh + 2 * kvh) * hd
        b.tensor(f"{p}.w_qkv", h * qkv_cols * bpp, TensorClass.WEIGHT)
        qkv = b.act(f"{p}.qkv_out", t * qkv_cols * act)
        b.add(f"{p}.qkv", OpKind.GEMM, flops=2 * t * h * qkv_cols, weights=[f"{p}.w_qkv"],
              inputs=[ln1], outputs=[qkv], tokens=t, layer=layer)

        attn_flops = 4 * batch * qh * q_len * kv_len * hd
        attn_out = b.act(f"{p}.attn_out", t * qh * hd * act)
        if phase.is_prefill:
            kv = b.tensor(f"{p}.kv", kv_layer_bytes(kv_len), TensorClass.KV_CACHE, writeback=True)
            b.add(f"{p}.attn", OpKind.ATTENTION, flops=attn_flops, inputs=[qkv],
                  outputs=[attn_out, kv], tokens=t, layer=layer)
        else:
            kv = b.tensor(f"{p}.kv", kv_layer_bytes(kv_len), TensorClass.KV_CACHE)
            kv_new = b.tensor(f"{p}.kv_new", kv_layer_bytes(q_len), TensorClass.KV_CACHE, writeback=True)
            b.add(f"{p}.attn", OpKind.ATTENTION, flops=attn_flops, weights=[kv], inputs=[qkv],
                  outputs=[attn_out, kv_new], tokens=t, layer=layer)

        b.tensor(f"{p}.w_o", qh * hd * h * bpp, TensorClass.WEIGHT)
        proj = b.act(f"{p}.proj_out", t * h * act)
        b.add(f"{p}.proj", OpKind.GEMM, flops=2 * t * qh * hd * h, weights=[f"{p}.w_o"],
              inputs=[attn_out], outputs=[proj], tokens=t, layer=layer)
        residual = reduce_into(f"{p}.attn_allreduce", CollectiveKind.ALL_REDUCE, proj, x,
                               t * h * act, layer)

        ln2, x = norm(f"{p}.ln2", f"{p}.w_ln2", layer, residual)

        if not model.is_moe:
            f = sh.ffn_local
            m_up = model.ffn_matrices - 1
            b.tensor(f"{p}.w_up", m_up * h * f * bpp, TensorClass.WEIGHT)
            b.tensor(f"{p}.w_down", f * h * bpp, TensorClass.WEIGHT)
            up = b.act(f"{p}.up_out", t * f * act)
            b.add(f"{p}.ffn_up", OpKind.GEMM, flops=2 * t * h * f * m_up, weights=[f"{p}.w_up"],
                  inputs=[ln2], outputs=[up], tokens=t, layer=layer)
            down = b.act(f"{p}.down_out", t * h * act)
            b.add(f"{p}.ffn_down", OpKind.GEMM, flops=2 * t * f * h, weights=[f"{p}.w_down"],
                  inputs=[up], outputs=[down], tokens=t, layer=layer)
            residual = reduce_into(f"{p}.ffn_allreduce", CollectiveKind.ALL_REDUCE, down, x,
                                   t * h * act, layer)
            continue

        E = model.num_experts
        b.tensor(f"{p}.w_gate", h * E * bpp, TensorClass.WEIGHT)
        router = b.act(f"{p}.router_out", t * E * act)
        b.add(f"{p}.gate", OpKind.MOE_GATE, flops=2 * t * h * E, weights=[f"{p}.w_gate"],
              inputs=[ln2], outputs=[router], tokens=t, layer=layer)

        f = sh.expert_intermediate
        m = model.ffn_matrices
        rows_per_expert = max(1, (t * k) // E)
        expert_mode = sh.moe_mode == "expert"
        count = sh.local_experts if expert_mode else E
        groups = _expert_weights(b, p, count, model, f, expert_granularity)
        if expert_mode:
            routed = _ceil_div(t * k, n)  # token-expert assignments landing on this xPU
            total_flops = _ceil_div(2 * t * k * h * f * m, n)
            exp_in = [ln2, router]
            if n > 1:
                disp = b.act(f"{p}.dispatch_out", routed * h * act)
                b.add(f"{p}.dispatch", OpKind.COLLECTIVE, inputs=[ln2, router], outputs=[disp],
                      collective=coll(CollectiveKind.ALL_TO_ALL, routed * h * act), layer=layer)
                exp_in = [disp]
            exp_outs = _expert_nodes(b, p, layer, groups, exp_in, routed * h * act, total_flops,
                                     rows_per_expert)
            if n > 1:
                out = b.act(f"{p}.combine_out", t * h * act)
                b.add(f"{p}.combine", OpKind.COLLECTIVE, inputs=exp_outs + [x], outputs=[out],
                      collective=coll(CollectiveKind.ALL_TO_ALL, routed * h * act), layer=layer)
                residual = (out,)
            else:
                residual = tuple(exp_outs) + (x,)
        else:
            total_flops = 2 * t * k * h * f * m
            exp_outs = _expert_nodes(b, p, layer, groups, [ln2, router], t * h * act, total_flops,
                                     rows_per_expert)
            residual = reduce_into(f"{p}.moe_allreduce", CollectiveKind.ALL_REDUCE, exp_outs, x,
                                   t * h * act, layer)

    # Head: final norm, vocab-parallel LM head on the last position, gather, sample.
    lnf, _ = norm("final_ln", "w_ln_f", None, residual)
    rows = batch
    b.tensor("lm_head", vocab_local * h * bpp, TensorClass.WEIGHT)
    logits = b.act("logits", rows * vocab_local * act)
    b.add("lm_head", OpKind.GEMM, flops=2 * rows * h * vocab_local, weights=["lm_head"],
          inputs=[lnf], outputs=[logits], tokens=rows)
    if n > 1:
        full = b.act("logits_full", rows * vocab_local * n * act)
        b.add("logits.allgather", OpKind.COLLECTIVE, inputs=[logits], outputs=[full],
              collective=coll(CollectiveKind.ALL_GATHER, rows * vocab_local * act))
        logits = full
    tok = b.act("next_tokens", rows * 4)
    b.add("sample", OpKind.SAMPLE, flops=SAMPLE_FLOPS_PER_ELEMENT * rows * model.vocab_size,
          inputs=[logits], outputs=[tok], tokens=rows)

    meta = {
        "model": model.name,
        "phase": phase.label(task),
        "parallelism": n,
        "batch": batch,
        "prompt_len": task.prompt_len,
        "gen_len": task.gen_len,
        "q_len": q_len,
        "kv_len": kv_len,
        "moe_parallelism": sh.moe_mode,
        "expert_granularity": expert_granularity,
    }
    name = f"{model.name}/{phase.label(task)}/tp{n}"
    return OperatorGraph.build(name, b.ops, b.tensors.values(), meta)


def _expert_weights(b: _GraphBuilder, p, count, model: ModelSpec, f, granularity) -> List[List[str]]:
    """Weight groups for the expert FFN nodes of one layer.

    Fused: the grouped kernel's two stacked tensors (gate/up and down
    projections of every local expert).  Per expert: one tensor per expert.
    """
    h, bpp = model.hidden_size, model.bytes_per_param
    if granularity == "fused":
        up = b.tensor(f"{p}.experts_w_up", count * (model.ffn_matrices - 1) * h * f * bpp, TensorClass.WEIGHT)
        down = b.tensor(f"{p}.experts_w_down", count * f * h * bpp, TensorClass.WEIGHT)
        return [[up, down]]
    size = model.ffn_matrices * h * f * bpp
    return [[b.tensor(f"{p}.expert{j}", size, TensorClass.WEIGHT)] for j in range(count)]


def _expert_nodes(b: _GraphBuilder, p, layer, groups, inputs, out_size, total_flops, rows) -> List[str]:
    if len(groups) == 1:
        out = b.act(f"{p}.experts_out", out_size)
        b.add(f"{p}.experts", OpKind.EXPERT_FFN, flops=total_flops, weights=groups[0],
              inputs=inputs, outputs=[out], tokens=rows, layer=layer)
        return [out]
    count = len(groups)
    outs = []
    for j, weights in enumerate(groups):
        lo, hi = total_flops * j // count, total_flops * (j + 1) // count
        part = b.act(f"{p}.expert{j}_out", max(1, out_size // count))
        b.add(f"{p}.expert{j}", OpKind.EXPERT_FFN, flops=hi - lo, weights=weights, inputs=inputs,
              outputs=[part], tokens=rows, layer=layer)
        outs.append(part)
    return outs


# ---------------------------------------------------------------------------
# Roofline evaluation
# ---------------------------------------------------------------------------


def op_compute_time(op: OpNode, xpu: XpuSpec, batch: int) -> int:
    """Roofline duration of a non-collective op, in picoseconds.

    max(flops / (peak * mfu(batch)), local bytes / local bandwidth)
    """
    if op.kind is OpKind.COLLECTIVE:
        raise ValueError("collective ops are timed by the communication model")
    compute = 0
    if op.flops:
        rate = Fraction(xpu.flops) * Fraction(mfu_at(batch, xpu))
        compute = math.ceil(Fraction(op.flops * PS_PER_S) / rate)
    memory = 0
    if op.local_bytes_touched:
        memory = math.ceil(Fraction(op.local_bytes_touched * PS_PER_S) / Fraction(xpu.local_mem_bandwidth))
    return max(compute, memory)


def is_memory_bound(op: OpNode, xpu: XpuSpec, batch: int) -> bool:
    compute = op.flops / (xpu.flops * mfu_at(batch, xpu))
    memory = op.local_bytes_touched / xpu.local_mem_bandwidth
    return memory >= compute


# ---------------------------------------------------------------------------
# Trace import / export (JSON lines)
# ---------------------------------------------------------------------------


def _tensor_record(t: TensorDesc) -> Dict[str, Any]:
    rec = {"id": t.id, "size": t.size, "class": t.tensor_class.value}
    if t.writeback:
        rec["writeback"] = True
    return rec


def _op_record(op: OpNode, graph: OperatorGraph, defined: set) -> Dict[str, Any]:
    def defs(ids):
        out = []
        for tid in ids:
            if tid in defined:
                out.append(tid)
            else:
                defined.add(tid)
                out.append(_tensor_record(graph.tensor(tid)))
        return out

    rec: Dict[str, Any] = {
        "id": op.id,
        "name": op.name,
        "kind": op.kind.value,
        "flops": op.flops,
        "bytes_in": op.activation_bytes_in,
        "bytes_out": op.activation_bytes_out,
        "deps": list(op.deps),
        "tokens": op.tokens,
        "tensors": defs(op.weight_tensors),
        "inputs": defs(op.inputs),
        "outputs": defs(op.outputs),
    }
    if op.layer is not None:
        rec["layer"] = op.layer
    if op.collective is not None:
        rec["collective"] = {
            "kind": op.collective.kind.value,
            "payload_per_gpu": op.collective.payload_per_gpu,
            "participants": op.collective.participants,
        }
    return rec


def export_trace(graph: OperatorGraph, path: Union[str, Path]) -> Path:
    """Write ``graph`` as JSON lines: a header record, then one record per op."""
    path = Path(path)
    defined: set = set()
    lines = [json.dumps({"format": TRACE_FORMAT, "version": TRACE_VERSION, "name": graph.name,
                         "meta": dict(graph.meta)}, sort_keys=True)]
    for op in graph.ops:
        lines.append(json.dumps(_op_record(op, graph, defined), sort_keys=True))
    path.write_text("\n".join(lines) + "\n")
    return path


_OP_KEYS = {"id", "name", "kind", "flops", "bytes", "bytes_in", "bytes_out", "deps", "tokens", "tensors",
            "inputs", "outputs", "layer", "collective"}


def import_trace(path: Union[str, Path]) -> OperatorGraph:
    """Load a JSON-lines trace.

    Each op record has ``kind``, ``flops``, ``deps`` and optionally ``id``,
    ``name``, ``bytes`` (or ``bytes_in``/``bytes_out``), ``tokens``,
    ``tensors`` (pageable tensors; objects with ``id``/``size``/``class``, or
    ids defined earlier), ``inputs``/``outputs`` and ``collective``.  An
    optional first record carrying ``"format": "tabsim-trace"`` names the
    graph.
    """
    path = Path(path)
    name = path.stem
    meta: Dict[str, Any] = {}
    ops: List[OpNode] = []
    tensors: Dict[str, TensorDesc] = {}
    tensor_line: Dict[str, int] = {}

    def resolve(refs, line_no, default_class):
        ids = []
        if not isinstance(refs, list):
            raise TraceFormatError(line_no, "tensor lists must be JSON arrays")
        for r in refs:
            if isinstance(r, str):
                ids.append(r)
                continue
            if not isinstance(r, dict) or "id" not in r or "size" not in r:
                raise TraceFormatError(line_no, f"bad tensor reference {r!r}")
            try:
                desc = TensorDesc(str(r["id"]), int(r["size"]), r.get("class", default_class),
                                  writeback=bool(r.get("writeback", False)))
            except (ValueError, GraphError) as exc:
                raise TraceFormatError(line_no, str(exc)) from None
            prev = tensors.get(desc.id)
            if prev is not None and prev != desc:
                raise TraceFormatError(line_no, f"tensor {desc.id!r} redefined differently "
                                                f"(first defined on line {tensor_line[desc.id]})")
            tensors[desc.id] = desc
            tensor_line.setdefault(desc.id, line_no)
            ids.append(desc.id)
        return ids

    with path.open() as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(line_no, f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise TraceFormatError(line_no, "record must be a JSON object")
            if "format" in rec:
                if rec["format"] != TRACE_FORMAT:
                    raise TraceFormatError(line_no, f"unknown trace format {rec['format']!r}")
                name = rec.get("name", name)
                meta = dict(rec.get("meta", {}))
                continue
            unknown = set(rec) - _OP_KEYS
            if unknown:
                raise TraceFormatError(line_no, f"unknown fields {sorted(unknown)}")
            for key in ("kind", "flops", "deps"):
                if key not in rec:
                    raise TraceFormatError(line_no, f"missing required field {key!r}")
            try:
                kind = OpKind(rec["kind"])
            except ValueError:
                raise TraceFormatError(line_no, f"unknown op kind {rec['kind']!r}") from None
            oid = rec.get("id", len(ops))
            if not isinstance(oid, int) or isinstance(oid, bool):
                raise TraceFormatError(line_no, "op id must be an integer")
            flops = rec["flops"]
            if not isinstance(flops, int) or flops < 0:
                raise TraceFormatError(line_no, "flops must be a non-negative integer")
            deps = rec["deps"]
            if not isinstance(deps, list) or not all(isinstance(d, int) for d in deps):
                raise TraceFormatError(line_no, "deps must be a list of integer op ids")
            collective = None
            if "collective" in rec:
                c = rec["collective"]
                try:
                    collective = CollectiveRequest(CollectiveKind(c["kind"]), int(c["payload_per_gpu"]),
                                                   int(c["participants"]))
                except (KeyError, TypeError, ValueError) as exc:
                    raise TraceFormatError(line_no, f"bad collective record ({exc})") from None
            weights = resolve(rec.get("tensors", []), line_no, "weight")
            inputs = resolve(rec.get("inputs", []), line_no, "activation")
            outputs = resolve(rec.get("outputs", []), line_no, "activation")
            b_in = rec.get("bytes_in", rec.get("bytes", 0))
            b_out = rec.get("bytes_out", 0)
            try:
                ops.append(OpNode(
                    id=oid, name=str(rec.get("name", f"op{oid}")), kind=kind, flops=flops,
                    weight_tensors=tuple(weights), activation_bytes_in=int(b_in),
                    activation_bytes_out=int(b_out), deps=tuple(deps), collective=collective,
                    tokens=int(rec.get("tokens", 1)), inputs=tuple(inputs), outputs=tuple(outputs),
                    layer=rec.get("layer"),
                ))
            except GraphError as exc:
                raise TraceFormatError(line_no, str(exc)) from None
    return OperatorGraph.build(name, ops, tensors.values(), meta)
