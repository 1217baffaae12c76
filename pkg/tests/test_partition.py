import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coexplore.analysis import TableLatency, device, placeholder_network, random_instance
from coexplore.core import FpgaPool, XC7Z015
from coexplore.partition import (
    InstanceTooLarge,
    NoFeasiblePlan,
    Partition,
    PipelinePlan,
    brute_force_optimize,
    enumerate_partitions,
    least_loaded_plan,
    min_bottleneck_latency,
    optimize,
)
from coexplore.perf import evaluate_plan

A, B = device("A"), device("B")


def ten_ms(depth=2):
    return placeholder_network(depth), TableLatency({"A": [0.005] * depth})


def test_slow_target_prefers_one_stage():
    net, fn = ten_ms()
    plan = optimize(net, FpgaPool(((A, 2),)), 40, fn)
    assert plan.partition.bounds == (2,)
    assert plan.efficiency == pytest.approx(0.4)


def test_one_stage_fits_single_device():
    net, fn = ten_ms()
    plan = optimize(net, FpgaPool(((A, 1),)), 80, fn)
    assert plan.partition.bounds == (2,) and plan.efficiency == pytest.approx(0.8)


def test_split_when_one_stage_misses_period():
    net, fn = ten_ms()
    plan = optimize(net, FpgaPool(((A, 2),)), 120, fn)
    assert plan.partition.bounds == (1, 2)
    assert plan.efficiency == pytest.approx(0.6)
    assert [(s.name, s.unit) for s in plan.assignment] == [("A", 0), ("A", 1)]


def test_nothing_fits():
    net, fn = ten_ms()
    with pytest.raises(NoFeasiblePlan):
        optimize(net, FpgaPool(((A, 2),)), 300, fn)


def test_enumerate_partitions_counts():
    assert len(enumerate_partitions(5, 3)) == 1 + 4 + 6
    assert [p.bounds for p in enumerate_partitions(1, 4)] == [(1,)]
    assert sum(1 for _ in enumerate_partitions(6, 6)) == 2 ** 5


def test_example_partition_stages():
    p = Partition((1, 3, 5))
    assert [list(r) for r in p.stages()] == [[0], [1, 2], [3, 4]]
    assert p.stage_of() == [0, 1, 1, 2, 2]
    assert Partition((1, 3, 5)) in enumerate_partitions(5, 3)


def test_brute_force_guard():
    with pytest.raises(InstanceTooLarge):
        brute_force_optimize(placeholder_network(13), FpgaPool(((A, 2),)), 10,
                             TableLatency({"A": [0.001] * 13}))
    with pytest.raises(InstanceTooLarge):
        brute_force_optimize(placeholder_network(3), FpgaPool(((A, 5),)), 10,
                             TableLatency({"A": [0.001] * 3}))


def test_heterogeneous_uses_fast_device_for_heavy_stage():
    net = placeholder_network(2)
    fn = TableLatency({"A": [0.004, 0.012], "B": [0.008, 0.024]})
    plan = optimize(net, FpgaPool(((A, 1), (B, 1))), 60, fn)
    brute = brute_force_optimize(net, FpgaPool(((A, 1), (B, 1))), 60, fn)
    assert plan.efficiency == brute.efficiency
    assert plan.eval.feasible


def test_plan_round_trip():
    net, fn = ten_ms(3)
    pool = FpgaPool(((A, 3),))
    plan = optimize(net, pool, 150, fn)
    assert PipelinePlan.from_dict(plan.to_dict(), pool) == plan


def test_roofline_optimize_matches_brute_force(tiny_space, pool2):
    rng = np.random.default_rng(5)
    for _ in range(15):
        net = tiny_space.random_network(rng)
        for ts in (35, 60, 100):
            try:
                ref = brute_force_optimize(net, pool2, ts)
            except NoFeasiblePlan:
                with pytest.raises(NoFeasiblePlan):
                    optimize(net, pool2, ts)
                continue
            assert optimize(net, pool2, ts) == ref


def test_least_loaded_minimizes_bottleneck():
    rng = np.random.default_rng(1)
    for _ in range(30):
        inst = random_instance(rng, max_depth=6)
        plan = least_loaded_plan(inst.net, inst.pool, inst.ts_fps, inst.latency)
        worst = max(s.latency_sec for s in plan.eval.stages)
        assert worst == pytest.approx(min_bottleneck_latency(inst.net, inst.pool, inst.latency), rel=1e-12)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_optimizer_agrees_with_oracle(seed):
    inst = random_instance(np.random.default_rng(seed))
    try:
        ref = brute_force_optimize(inst.net, inst.pool, inst.ts_fps, inst.latency)
    except NoFeasiblePlan:
        with pytest.raises(NoFeasiblePlan):
            optimize(inst.net, inst.pool, inst.ts_fps, inst.latency)
        assert min_bottleneck_latency(inst.net, inst.pool, inst.latency) * inst.ts_fps > 1 + 1e-9
        return
    got = optimize(inst.net, inst.pool, inst.ts_fps, inst.latency)
    assert got == ref
    assert got.eval.feasible
    # re-evaluating the returned plan reproduces its score
    again = evaluate_plan(inst.net, got.partition.bounds, got.assignment, inst.ts_fps,
                          pool=inst.pool, latency_fn=inst.latency)
    assert again == got.eval


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.5, 0.95))
def test_lower_target_never_loses_feasibility(seed, scale):
    inst = random_instance(np.random.default_rng(seed))
    try:
        optimize(inst.net, inst.pool, inst.ts_fps, inst.latency)
    except NoFeasiblePlan:
        return
    optimize(inst.net, inst.pool, inst.ts_fps * scale, inst.latency)
