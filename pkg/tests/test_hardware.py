import pytest
from hypothesis import given, settings, strategies as st

from tabsim.exceptions import ConfigError, FabricMismatchError
from tabsim.hardware import (
    KiB,
    MiB,
    TB,
    BandwidthEfficiency,
    FabricKind,
    HardwareConfig,
    PrimitiveOp,
    XpuSpec,
    mfu_at,
    nvlink_fabric,
    primitive_latency,
    tab_fabric,
    transfer_ps,
)

EXACT = BandwidthEfficiency.constant(1.0)


@pytest.fixture
def tab():
    return tab_fabric(4.0 * TB, EXACT)


def test_read_2kib_matches_closed_form(tab):
    # 220 ns + 2048 B / 4000 B/ns = 220.512 ns
    assert primitive_latency(PrimitiveOp.READ, 2048, tab) == 220_512


def test_zero_byte_write_is_fixed_latency(tab):
    assert primitive_latency(PrimitiveOp.WRITE, 0, tab) == 90_000


def test_write_accumulate_one_mib(tab):
    # hand computation: 90 + 2**20 / 4000 ns = 352.144 ns
    assert primitive_latency(PrimitiveOp.WRITE_ACCUMULATE, 1 << 20, tab) == 352_144


def test_notification_ignores_size(tab):
    assert primitive_latency(PrimitiveOp.NOTIFICATION, 0, tab) == 40_000
    assert primitive_latency(PrimitiveOp.NOTIFICATION, 10**9, tab) == 40_000


def test_write_accumulate_rejected_on_nvlink():
    with pytest.raises(FabricMismatchError):
        primitive_latency(PrimitiveOp.WRITE_ACCUMULATE, 1024, nvlink_fabric())


def test_nvlink_write_read_fixed_parts():
    nv = nvlink_fabric(efficiency=EXACT)
    assert primitive_latency(PrimitiveOp.WRITE, 0, nv) == 500_000
    assert primitive_latency(PrimitiveOp.READ, 0, nv) == 1_000_000
    assert primitive_latency(PrimitiveOp.NOTIFICATION, 0, nv) == 0


def test_negative_size_rejected(tab):
    with pytest.raises(ValueError):
        primitive_latency(PrimitiveOp.READ, -1, tab)


def test_tab_latency_ordering_defaults(tab):
    assert tab.read_latency_ns >= tab.write_latency_ns >= tab.notification_latency_ns >= 0


@settings(max_examples=300, deadline=None)
@given(size=st.integers(min_value=0, max_value=1 << 34))
def test_exact_closed_forms(size):
    fab = tab_fabric(4.0 * TB, EXACT)
    var = -(-size * 1000 // 4000)  # size/4000 ns, rounded up to a picosecond
    assert primitive_latency(PrimitiveOp.READ, size, fab) == 220_000 + var
    assert primitive_latency(PrimitiveOp.WRITE, size, fab) == 90_000 + var
    assert primitive_latency(PrimitiveOp.WRITE_ACCUMULATE, size, fab) == 90_000 + var


@settings(max_examples=200, deadline=None)
@given(size=st.integers(min_value=0, max_value=1 << 33))
def test_read_minus_write_is_130ns(size):
    # holds with the default (non-constant) efficiency curve too
    fab = tab_fabric(4.0 * TB)
    diff = primitive_latency(PrimitiveOp.READ, size, fab) - primitive_latency(PrimitiveOp.WRITE, size, fab)
    assert diff == 130_000


@settings(max_examples=200, deadline=None)
@given(a=st.integers(min_value=0, max_value=1 << 32), b=st.integers(min_value=0, max_value=1 << 32),
       op=st.sampled_from([PrimitiveOp.READ, PrimitiveOp.WRITE, PrimitiveOp.NOTIFICATION]),
       kind=st.sampled_from(["tab", "nvlink"]))
def test_latency_monotone_in_size(a, b, op, kind):
    fab = tab_fabric() if kind == "tab" else nvlink_fabric()
    lo, hi = sorted((a, b))
    assert primitive_latency(op, lo, fab) <= primitive_latency(op, hi, fab)


class TestEfficiency:
    def test_default_endpoints(self):
        eff = BandwidthEfficiency.default()
        assert eff(1) == 0.25
        assert eff(4 * KiB) == 0.25
        assert eff(64 * MiB) == 0.95
        assert eff(1 << 40) == 0.95

    def test_log_midpoint(self):
        # 4 KiB = 2**12 and 64 MiB = 2**26, so 2**19 sits halfway in log2
        eff = BandwidthEfficiency.default()
        assert eff(1 << 19) == pytest.approx(0.60)

    @settings(max_examples=200, deadline=None)
    @given(a=st.integers(1, 1 << 36), b=st.integers(1, 1 << 36))
    def test_non_decreasing(self, a, b):
        eff = BandwidthEfficiency.default()
        lo, hi = sorted((a, b))
        assert eff(lo) <= eff(hi)

    @pytest.mark.parametrize("knots", [
        (),
        ((1024, 0.5), (512, 0.6)),
        ((1024, 0.9), (2048, 0.5)),
        ((1024, 1.5),),
        ((1024, 0.0),),
    ])
    def test_invalid_knots(self, knots):
        with pytest.raises(ConfigError):
            BandwidthEfficiency(knots)


class TestMfu:
    spec = XpuSpec(compute_fp16=1e15, local_mem_bandwidth=1e12)

    def test_at_knot(self):
        for b, u in self.spec.mfu_curve:
            assert mfu_at(b, self.spec) == u

    def test_clamped(self):
        assert mfu_at(1, self.spec) == self.spec.mfu_curve[0][1]
        assert mfu_at(10**6, self.spec) == self.spec.mfu_curve[-1][1]

    def test_midway(self):
        (b1, u1), (b2, u2) = self.spec.mfu_curve[1], self.spec.mfu_curve[2]
        assert mfu_at((b1 + b2) // 2, self.spec) == pytest.approx((u1 + u2) / 2)

    def test_clamped_below_first_knot(self):
        spec = XpuSpec(1e15, 1e12, mfu_curve=((4, 0.3), (8, 0.6)))
        assert mfu_at(1, spec) == 0.3

    def test_batch_must_be_positive(self):
        with pytest.raises(ValueError):
            mfu_at(0, self.spec)

    @pytest.mark.parametrize("curve", [((8, 0.5), (4, 0.6)), ((1, 0.0),), ((1, 1.2),)])
    def test_invalid_curves(self, curve):
        with pytest.raises(ConfigError):
            XpuSpec(1e15, 1e12, mfu_curve=curve)


def test_xpu_invariants():
    with pytest.raises(ConfigError):
        XpuSpec(compute_fp16=0, local_mem_bandwidth=1e12)
    with pytest.raises(ConfigError):
        XpuSpec(compute_fp16=1e15, local_mem_bandwidth=-1)
    assert XpuSpec(1e15, 1e12, compute_scale=1.5).flops == 1.5e15


def test_hardware_remote_capacity_iff_tab():
    xpu = XpuSpec(1e15, 1e12)
    HardwareConfig("a", 4, xpu, tab_fabric(), remote_mem_capacity=1 << 40)
    HardwareConfig("b", 8, xpu, nvlink_fabric())
    with pytest.raises(ConfigError):
        HardwareConfig("c", 4, xpu, tab_fabric())
    with pytest.raises(ConfigError):
        HardwareConfig("d", 8, xpu, nvlink_fabric(), remote_mem_capacity=1 << 40)
    with pytest.raises(ConfigError):
        HardwareConfig("e", 0, xpu, nvlink_fabric())


def test_with_helpers_are_pure():
    hw = HardwareConfig("a", 4, XpuSpec(1e15, 1e12), tab_fabric(), remote_mem_capacity=1 << 40)
    hw2 = hw.with_remote_bandwidth(6.4 * TB)
    assert hw.fabric.per_gpu_bandwidth == 4.0 * TB
    assert hw2.fabric.per_gpu_bandwidth == 6.4 * TB
    assert hw2.fabric.kind is FabricKind.TAB_SHARED_MEMORY
    assert hw.with_local_capacity(123).xpu.local_mem_capacity == 123


def test_transfer_ps_exact_for_float_efficiency():
    # 64 MiB at 4 TB/s * 0.95, checked against rational arithmetic
    from fractions import Fraction
    import math

    size = 64 * MiB
    expected = math.ceil(Fraction(size * 10**12) / (Fraction(4 * 10**12) * Fraction(0.95)))
    assert transfer_ps(size, 4 * TB, 0.95) == expected
    assert transfer_ps(0, 4 * TB) == 0
