import math

import pytest
from hypothesis import given, settings, strategies as st

from tabsim.comm import (
    CollectiveKind,
    CollectiveRequest,
    collective_time_nvlink,
    collective_time_tab,
    collective_traffic,
    ring_schedule,
    speedup_decomposition,
    sweep_collectives,
    write_sweep_csv,
)
from tabsim.exceptions import FabricMismatchError
from tabsim.hardware import GB, MiB, TB, BandwidthEfficiency, FabricKind, nvlink_fabric, tab_fabric

EXACT = BandwidthEfficiency.constant(1.0)
TAB = tab_fabric(4.0 * TB, EXACT)
NV = nvlink_fabric(450 * GB, EXACT)
KINDS = list(CollectiveKind)


def req(kind, payload, n):
    return CollectiveRequest(kind, payload, n)


class TestTab:
    def test_allreduce_is_one_accumulate_round(self):
        t = 64 * MiB
        tr = collective_traffic(req(CollectiveKind.ALL_REDUCE, t, 8), FabricKind.TAB_SHARED_MEMORY)
        assert (tr.rounds, tr.bytes_sent, tr.bytes_received) == (1, t, t)
        assert tr.total == 2 * t

    def test_p2p_2kib(self):
        # write 90 + 0.512, notification 40, read 220 + 0.512 (ns)
        assert collective_time_tab(req(CollectiveKind.P2P, 2048, 2), TAB) == 351_024

    def test_reduce_scatter_reads_one_nth(self):
        tr = collective_traffic(req(CollectiveKind.REDUCE_SCATTER, 8 * MiB, 8), FabricKind.TAB_SHARED_MEMORY)
        assert tr.bytes_received == 1 * MiB

    def test_allgather_reads_gathered_tensor(self):
        tr = collective_traffic(req(CollectiveKind.ALL_GATHER, 1000, 4), FabricKind.TAB_SHARED_MEMORY)
        assert (tr.bytes_sent, tr.bytes_received) == (1000, 4000)

    def test_alltoall_reads_peer_chunks(self):
        tr = collective_traffic(req(CollectiveKind.ALL_TO_ALL, 8000, 4), FabricKind.TAB_SHARED_MEMORY)
        assert (tr.bytes_sent, tr.bytes_received) == (8000, 6000)

    def test_allreduce_time_hand_sum(self):
        t = 1 << 20
        var = math.ceil(t * 1000 / 4000)
        expected = (90_000 + var) + 40_000 + (220_000 + var)
        assert collective_time_tab(req(CollectiveKind.ALL_REDUCE, t, 8), TAB) == expected

    def test_rejects_nvlink(self):
        with pytest.raises(FabricMismatchError):
            collective_time_tab(req(CollectiveKind.ALL_REDUCE, 1024, 8), NV)

    @settings(max_examples=100, deadline=None)
    @given(t=st.integers(1, 1 << 32), n=st.integers(2, 16))
    def test_allreduce_equals_reduce_scatter_plus_read_difference(self, t, n):
        ar = collective_time_tab(req(CollectiveKind.ALL_REDUCE, t, n), TAB)
        rs = collective_time_tab(req(CollectiveKind.REDUCE_SCATTER, t, n), TAB)
        read_diff = TAB.stream_ps(t) - TAB.stream_ps(-(-t // n))
        assert ar == rs + read_diff

    def test_tiny_payload_collapses_to_fixed_costs(self):
        fixed = 90_000 + 40_000 + 220_000
        for kind in (CollectiveKind.ALL_REDUCE, CollectiveKind.REDUCE_SCATTER):
            assert fixed < collective_time_tab(req(kind, 1, 8), TAB) <= fixed + 2


class TestRing:
    def test_allreduce_n8_steps_and_traffic(self):
        t = 8 * 1000
        steps, chunk = ring_schedule(req(CollectiveKind.ALL_REDUCE, t, 8))
        assert (steps, chunk) == (14, 1000)
        tr = collective_traffic(req(CollectiveKind.ALL_REDUCE, t, 8), FabricKind.NVLINK_RING)
        assert tr.rounds == 14
        assert tr.bytes_sent == tr.bytes_received == 14 * t // 8

    def test_smallest_ring(self):
        t = 4096
        tr = collective_traffic(req(CollectiveKind.ALL_REDUCE, t, 2), FabricKind.NVLINK_RING)
        assert tr.rounds == 2
        assert tr.bytes_sent == t

    def test_64mib_allreduce_n8(self):
        t = 64 * MiB
        step = 500_000 + math.ceil((8 * MiB) * 10**12 / (450 * 10**9))
        got = collective_time_nvlink(req(CollectiveKind.ALL_REDUCE, t, 8), NV)
        assert got == 14 * step
        assert got / 1e6 == pytest.approx(268.0, abs=0.05)  # microseconds

    def test_step_counts(self):
        n = 6
        assert ring_schedule(req(CollectiveKind.REDUCE_SCATTER, 600, n)) == (5, 100)
        assert ring_schedule(req(CollectiveKind.ALL_GATHER, 600, n)) == (5, 600)
        assert ring_schedule(req(CollectiveKind.ALL_TO_ALL, 600, n)) == (5, 100)
        assert ring_schedule(req(CollectiveKind.P2P, 600, n)) == (1, 600)

    def test_rejects_tab(self):
        with pytest.raises(FabricMismatchError):
            collective_time_nvlink(req(CollectiveKind.ALL_REDUCE, 1024, 8), TAB)

    @settings(max_examples=100, deadline=None)
    @given(k=st.integers(1, 1 << 20), n=st.integers(2, 16), rank=st.integers(0, 15))
    def test_counted_ring_traffic_matches_closed_form(self, k, n, rank):
        t = k * n
        tr = collective_traffic(req(CollectiveKind.ALL_REDUCE, t, n), FabricKind.NVLINK_RING, rank=rank % n)
        assert tr.bytes_sent == tr.bytes_received == 2 * (n - 1) * t // n


@settings(max_examples=100, deadline=None)
@given(k=st.integers(1, 1 << 16))
def test_traffic_trends_in_n(k):
    t = k * 720720  # divisible by every N in 2..16
    ring = [collective_traffic(req(CollectiveKind.ALL_REDUCE, t, n), FabricKind.NVLINK_RING).bytes_sent
            for n in range(2, 17)]
    tab = {collective_traffic(req(CollectiveKind.ALL_REDUCE, t, n), FabricKind.TAB_SHARED_MEMORY).total
           for n in range(2, 17)}
    assert ring == sorted(ring) and len(set(ring)) == len(ring)
    assert all(r < 2 * t for r in ring)
    assert tab == {2 * t}


@settings(max_examples=150, deadline=None)
@given(kind=st.sampled_from(KINDS), n=st.integers(2, 16), p1=st.integers(1, 1 << 30), p2=st.integers(1, 1 << 30),
       bw1=st.floats(1e10, 1e13), bw2=st.floats(1e10, 1e13), fabric=st.sampled_from(["tab", "nv"]))
def test_monotone_in_payload_and_bandwidth(kind, n, p1, p2, bw1, bw2, fabric):
    make = tab_fabric if fabric == "tab" else nvlink_fabric
    f = collective_time_tab if fabric == "tab" else collective_time_nvlink
    lo, hi = sorted((p1, p2))
    slow, fast = sorted((bw1, bw2))
    fab = make(slow)
    assert f(req(kind, lo, n), fab) <= f(req(kind, hi, n), fab)
    assert f(req(kind, hi, n), make(fast)) <= f(req(kind, hi, n), fab)


class TestSpeedup:
    def test_rounded_latency_ratio_gives_70x(self):
        r = speedup_decomposition(8, 1000, 220, 450, 4000, round_latency_ratio=True)
        assert r.enabler1_latency == 14
        assert r.enabler1_bandwidth == 1.75
        assert r.enabler2_latency == 5
        assert r.overall_latency_bound == 70

    def test_bandwidth_bound(self):
        r = speedup_decomposition(8, 1000, 220, 450, 4000)
        assert r.overall_bandwidth_bound == pytest.approx(15.56, abs=0.01)

    def test_exact_latency_ratio(self):
        r = speedup_decomposition(8, 1000, 220, 450, 4000)
        assert r.enabler2_latency == pytest.approx(1000 / 220)
        assert r.overall_latency_bound == pytest.approx(63.636, abs=1e-3)

    def test_identity_hardware(self):
        r = speedup_decomposition(2, 500, 500, 100, 100)
        assert (r.enabler2_latency, r.enabler2_bandwidth) == (1.0, 1.0)
        assert (r.overall_latency_bound, r.overall_bandwidth_bound) == (2.0, 1.0)

    @settings(max_examples=200, deadline=None)
    @given(n=st.integers(2, 64), a=st.floats(1, 1e4), b=st.floats(1, 1e4), c=st.floats(1, 1e4),
           d=st.floats(1, 1e4))
    def test_products_bit_exact(self, n, a, b, c, d):
        r = speedup_decomposition(n, a, b, c, d)
        assert r.overall_latency_bound == r.enabler1_latency * r.enabler2_latency
        assert r.overall_bandwidth_bound == r.enabler1_bandwidth * r.enabler2_bandwidth

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            speedup_decomposition(1, 1, 1, 1, 1)
        with pytest.raises(ValueError):
            speedup_decomposition(8, 0, 1, 1, 1)


def test_request_invariants():
    with pytest.raises(ValueError):
        CollectiveRequest(CollectiveKind.ALL_REDUCE, 1024, 1)
    with pytest.raises(ValueError):
        CollectiveRequest(CollectiveKind.ALL_REDUCE, 0, 8)
    assert CollectiveRequest("all_gather", 1, 2).kind is CollectiveKind.ALL_GATHER


def test_sweep_csv_shape():
    rows = sweep_collectives([("tab", TAB), ("nv", NV)], [CollectiveKind.ALL_REDUCE], [1024, 2048], [2, 8])
    text = write_sweep_csv(rows)
    lines = text.strip().split("\n")
    assert lines[0] == "fabric,kind,participants,payload_bytes,time_ns"
    assert len(lines) == 1 + 2 * 2 * 2
    assert "tab,all_reduce,8,2048,351.024" in lines
