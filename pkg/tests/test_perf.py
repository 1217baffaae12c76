import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from coexplore.analysis import TableLatency, device, placeholder_network
from coexplore.core import CONV, ChildNetwork, FpgaPool, FpgaSpec, LayerSpec, TensorShape, XC7Z015
from coexplore.perf import (
    DeviceSlot,
    InvalidAssignment,
    InvalidPartition,
    PerfModelParams,
    evaluate_plan,
    layer_latency,
    roofline_latency_fn,
    stage_latency,
)

LAYER = LayerSpec(CONV, 24, 3, 1)
IN = TensorShape(32, 32, 3)


def test_compute_bound_layer():
    # 663552 MACs over 150 DSPs at 100 MHz; traffic (3072 + 24576 + 672) * 2 B over 2.1 GB/s
    compute = 663_552 / 1.5e10
    memory = (3072 + 24576 + 672) * 2 / 2.1e9
    assert compute == pytest.approx(4.4237e-5, rel=1e-4)
    assert memory == pytest.approx(2.697e-5, rel=1e-3)
    assert layer_latency(LAYER, IN, XC7Z015) == pytest.approx(compute, rel=1e-12)


def test_memory_bound_when_link_is_slow():
    slow = FpgaSpec("slow", 1, 1, 150, 1e8, 1e6)
    assert layer_latency(LAYER, IN, slow) == pytest.approx((3072 + 24576 + 672) * 2 / 1e6)


def test_infinite_link_leaves_compute():
    fast_link = FpgaSpec("fl", 1, 1, 150, 1e8, math.inf)
    assert layer_latency(LAYER, IN, fast_link) == pytest.approx(663_552 / 1.5e10)


def test_infinite_compute_leaves_transfer():
    fast_dsp = FpgaSpec("fd", 1, 1, math.inf, 1e8, 2.1e9)
    assert layer_latency(LAYER, IN, fast_dsp) == pytest.approx(56_640 / 2.1e9)


def test_stage_is_sum_plus_overhead():
    second = LayerSpec(CONV, 36, 5, 2)
    mid = TensorShape(32, 32, 24)
    pair = [(LAYER, IN), (second, mid)]
    expect = layer_latency(LAYER, IN, XC7Z015) + layer_latency(second, mid, XC7Z015)
    assert stage_latency(pair, XC7Z015) == pytest.approx(expect)
    params = PerfModelParams(stage_overhead_sec=1e-3)
    assert stage_latency(pair, XC7Z015, params) == pytest.approx(expect + 1e-3)


def test_empty_stage_rejected():
    with pytest.raises(InvalidPartition):
        stage_latency([], XC7Z015)


def test_negative_overhead_rejected():
    with pytest.raises(ValueError):
        PerfModelParams(stage_overhead_sec=-1)


# Stub: device A runs every layer in 10 ms.
STUB = TableLatency({"A": [0.010] * 5, "B": [0.020] * 5})
A, B = device("A"), device("B")
NET5 = placeholder_network(5)


def test_stub_plan_utilizations():
    ev = evaluate_plan(NET5, (1, 3, 5), (DeviceSlot(A, 0), DeviceSlot(A, 1), DeviceSlot(B, 0)),
                       20, latency_fn=STUB)
    assert [s.utilization for s in ev.stages] == pytest.approx([0.2, 0.4, 0.8])
    assert ev.avg_utilization == pytest.approx(1.4 / 3)
    assert ev.feasible
    assert ev.throughput_fps == pytest.approx(25.0)


def test_single_stage_over_period_is_infeasible():
    net = placeholder_network(2)
    table = TableLatency({"A": [0.004, 0.008]})
    assert evaluate_plan(net, (2,), (DeviceSlot(A),), 100, latency_fn=table).feasible is False
    ev = evaluate_plan(net, (1, 2), (DeviceSlot(A, 0), DeviceSlot(A, 1)), 100, latency_fn=table)
    assert [s.utilization for s in ev.stages] == pytest.approx([0.4, 0.8])
    assert ev.feasible and ev.avg_utilization == pytest.approx(0.6)


def test_utilization_just_over_one():
    net = placeholder_network(1)
    ev = evaluate_plan(net, (1,), (DeviceSlot(A),), 120, latency_fn=TableLatency({"A": [0.010]}))
    assert ev.stages[0].utilization == pytest.approx(1.2)
    assert not ev.feasible


@pytest.mark.parametrize("bounds", [(2, 2, 5), (3,), (0, 5), (), (2, 6)])
def test_invalid_partitions(bounds):
    with pytest.raises(InvalidPartition):
        evaluate_plan(NET5, bounds, tuple(DeviceSlot(A, i) for i in range(len(bounds))), 10,
                      latency_fn=STUB)


def test_assignment_length_mismatch():
    with pytest.raises(InvalidAssignment):
        evaluate_plan(NET5, (2, 5), (DeviceSlot(A),), 10, latency_fn=STUB)


def test_same_unit_twice():
    with pytest.raises(InvalidAssignment):
        evaluate_plan(NET5, (2, 5), (DeviceSlot(A, 0), DeviceSlot(A, 0)), 10, latency_fn=STUB)


def test_unit_beyond_pool():
    pool = FpgaPool(((A, 1), (B, 1)))
    with pytest.raises(InvalidAssignment):
        evaluate_plan(NET5, (2, 5), (DeviceSlot(A, 0), DeviceSlot(A, 1)), 10, pool=pool, latency_fn=STUB)


def test_roofline_fn_matches_manual_sum():
    net = ChildNetwork(IN, (LAYER, LayerSpec(CONV, 36, 5, 2), LayerSpec(CONV, 48, 1, 1)))
    fn = roofline_latency_fn()
    shapes = net.layer_inputs()
    manual = sum(layer_latency(net.layers[i], shapes[i], XC7Z015) for i in range(1, 3))
    assert fn(net, range(1, 3), XC7Z015) == pytest.approx(manual)


lat_st = st.lists(st.floats(1e-4, 0.05), min_size=1, max_size=6)


@given(lat_st, st.data(), st.floats(1, 200))
def test_plan_invariants(lats, data, ts):
    n = len(lats)
    m = data.draw(st.integers(1, n))
    cuts = sorted(data.draw(st.sets(st.integers(1, n - 1), min_size=m - 1, max_size=m - 1))) if m > 1 else []
    bounds = (*cuts, n)
    net = placeholder_network(n)
    slots = tuple(DeviceSlot(A, i) for i in range(len(bounds)))
    fn = TableLatency({"A": lats})
    ev = evaluate_plan(net, bounds, slots, ts, latency_fn=fn)
    worst = max(s.latency_sec for s in ev.stages)
    assert ev.throughput_fps == pytest.approx(1 / worst)
    for s in ev.stages:
        assert s.utilization == pytest.approx(s.latency_sec * ts)
    # doubling the target doubles every utilization
    ev2 = evaluate_plan(net, bounds, slots, 2 * ts, latency_fn=fn)
    assert ev2.avg_utilization == pytest.approx(2 * ev.avg_utilization)
    # a plan feasible at ts stays feasible at any lower target
    if ev.feasible:
        assert evaluate_plan(net, bounds, slots, ts / 2, latency_fn=fn).feasible
