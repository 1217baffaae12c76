"""Contiguous pipeline partitioning and device assignment.

``optimize`` searches every contiguous partition of the layer chain and every
assignment of stages to pool devices, returning the plan with the highest
average utilization among those meeting the throughput spec. Units of one
device spec are interchangeable, so assignments are enumerated over specs and
units are numbered in stage order afterwards.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Sequence

from .core import ChildNetwork, FpgaPool, FpgaSpec
from .perf import (
    FEASIBILITY_TOL,
    DeviceSlot,
    PlanEval,
    StageLatencyFn,
    check_partition,
    evaluate_plan,
    roofline_latency_fn,
    summarize,
)

BRUTE_FORCE_MAX_DEPTH = 12
BRUTE_FORCE_MAX_DEVICES = 4


class NoFeasiblePlan(RuntimeError):
    pass


class InstanceTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class Partition:
    """Exclusive end index of each stage; ``(1, 3, 5)`` is ``{l1}{l2,l3}{l4,l5}``."""

    bounds: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple(int(b) for b in self.bounds))
        check_partition(self.bounds, self.bounds[-1] if self.bounds else 0)

    @property
    def n_stages(self) -> int:
        return len(self.bounds)

    @property
    def depth(self) -> int:
        return self.bounds[-1]

    def stages(self) -> list[range]:
        starts = (0, *self.bounds[:-1])
        return [range(s, e) for s, e in zip(starts, self.bounds)]

    def stage_of(self) -> list[int]:
        """Stage index of every layer."""
        return [i for i, r in enumerate(self.stages()) for _ in r]


@dataclass(frozen=True)
class PipelinePlan:
    partition: Partition
    assignment: tuple[DeviceSlot, ...]
    eval: PlanEval

    @property
    def efficiency(self) -> float:
        return self.eval.avg_utilization

    def to_dict(self) -> dict:
        return {
            "bounds": list(self.partition.bounds),
            "devices": [[slot.name, slot.unit] for slot in self.assignment],
            "latency_sec": [s.latency_sec for s in self.eval.stages],
            "utilization": [s.utilization for s in self.eval.stages],
            "avg_utilization": self.eval.avg_utilization,
            "throughput_fps": self.eval.throughput_fps,
            "feasible": self.eval.feasible,
        }

    @classmethod
    def from_dict(cls, d: dict, pool: FpgaPool) -> "PipelinePlan":
        from .perf import StageEval

        slots = tuple(DeviceSlot(pool.spec(name), unit) for name, unit in d["devices"])
        stages = tuple(StageEval(i, slot.name, lat, u) for i, (slot, lat, u)
                       in enumerate(zip(slots, d["latency_sec"], d["utilization"])))
        ev = PlanEval(stages, d["avg_utilization"], d["feasible"], d["throughput_fps"])
        return cls(Partition(tuple(d["bounds"])), slots, ev)


def enumerate_partitions(n_layers: int, max_stages: int) -> list[Partition]:
    """All contiguous compositions of ``n_layers`` into 1..max_stages parts."""
    if n_layers < 1 or max_stages < 1:
        raise ValueError("n_layers and max_stages must be >= 1")
    out = []
    for m in range(1, min(n_layers, max_stages) + 1):
        for cuts in itertools.combinations(range(1, n_layers), m - 1):
            out.append(Partition((*cuts, n_layers)))
    return out


def _number_units(specs: Sequence[FpgaSpec]) -> tuple[DeviceSlot, ...]:
    used: dict[str, int] = {}
    slots = []
    for spec in specs:
        unit = used.get(spec.name, 0)
        used[spec.name] = unit + 1
        slots.append(DeviceSlot(spec, unit))
    return tuple(slots)


def _rank(ev: PlanEval, bounds: tuple[int, ...], slots: Sequence[DeviceSlot]) -> tuple:
    # Smaller is better: highest efficiency, then fewer stages, then boundaries, then devices.
    return (-ev.avg_utilization, len(bounds), bounds,
            tuple(s.name for s in slots), tuple(s.unit for s in slots))


def optimize(net: ChildNetwork, pool: FpgaPool, ts_fps: float,
             latency_fn: StageLatencyFn | None = None) -> PipelinePlan:
    """Best feasible pipeline plan for ``net`` on ``pool`` at ``ts_fps``.

    Exact enumeration with memoized stage latencies. A stage whose latency
    already misses the period on every device type is not extended further,
    which assumes ``latency_fn`` never decreases when a stage grows.

    Raises:
        NoFeasiblePlan: if no partition/assignment meets the throughput spec.
    """
    if latency_fn is None:
        latency_fn = roofline_latency_fn()
    n = net.depth
    specs = [spec for spec, _ in pool.sorted_specs()]
    remaining = [count for _, count in pool.sorted_specs()]
    max_stages = min(n, pool.total)
    limit = 1 + FEASIBILITY_TOL

    @lru_cache(maxsize=None)
    def lat(start: int, end: int, t: int) -> float:
        return latency_fn(net, range(start, end), specs[t])

    best: tuple | None = None
    best_plan: PipelinePlan | None = None
    bounds: list[int] = []
    chosen: list[int] = []

    def dfs(start: int) -> None:
        nonlocal best, best_plan
        if start == n:
            slots = _number_units([specs[t] for t in chosen])
            starts = (0, *bounds[:-1])
            lats = [lat(s, e, t) for s, e, t in zip(starts, bounds, chosen)]
            ev = summarize(lats, [s.name for s in slots], ts_fps)
            key = _rank(ev, tuple(bounds), slots)
            if best is None or key < best:
                best = key
                best_plan = PipelinePlan(Partition(tuple(bounds)), slots, ev)
            return
        ends = [n] if len(bounds) == max_stages - 1 else range(start + 1, n + 1)
        for end in ends:
            any_fits = False
            for t in range(len(specs)):
                if lat(start, end, t) * ts_fps > limit:
                    continue
                any_fits = True
                if remaining[t] == 0:
                    continue
                remaining[t] -= 1
                bounds.append(end)
                chosen.append(t)
                dfs(end)
                chosen.pop()
                bounds.pop()
                remaining[t] += 1
            if not any_fits:
                return

    dfs(0)
    if best_plan is None:
        raise NoFeasiblePlan(f"no plan meets {ts_fps} FPS")
    return best_plan


def _all_plans(n: int, pool: FpgaPool) -> Iterator[tuple[tuple[int, ...], tuple[DeviceSlot, ...]]]:
    typed = pool.sorted_specs()
    for part in enumerate_partitions(n, pool.total):
        m = part.n_stages
        for combo in itertools.product(range(len(typed)), repeat=m):
            if any(combo.count(t) > typed[t][1] for t in set(combo)):
                continue
            yield part.bounds, _number_units([typed[t][0] for t in combo])


def least_loaded_plan(net: ChildNetwork, pool: FpgaPool, ts_fps: float,
                      latency_fn: StageLatencyFn | None = None) -> PipelinePlan:
    """Plan minimizing the bottleneck stage latency, feasible or not."""
    if latency_fn is None:
        latency_fn = roofline_latency_fn()
    best = best_plan = None
    for bounds, slots in _all_plans(net.depth, pool):
        ev = evaluate_plan(net, bounds, slots, ts_fps, latency_fn=latency_fn)
        key = (max(s.latency_sec for s in ev.stages), *_rank(ev, bounds, slots)[1:])
        if best is None or key < best:
            best, best_plan = key, PipelinePlan(Partition(bounds), slots, ev)
    return best_plan


def min_bottleneck_latency(net: ChildNetwork, pool: FpgaPool,
                           latency_fn: StageLatencyFn | None = None) -> float:
    """Smallest achievable max stage latency over all plans.

    ``net`` admits a feasible plan at ``ts`` exactly when this value times
    ``ts`` is within the feasibility tolerance of 1.
    """
    if latency_fn is None:
        latency_fn = roofline_latency_fn()
    specs = [spec for spec, _ in pool.sorted_specs()]
    n = net.depth

    @lru_cache(maxsize=None)
    def lat(start: int, end: int, t: int) -> float:
        return latency_fn(net, range(start, end), specs[t])

    @lru_cache(maxsize=None)
    def best(start: int, counts: tuple[int, ...]) -> float:
        if start == n:
            return 0.0
        out = float("inf")
        for t, c in enumerate(counts):
            if c == 0:
                continue
            rest = counts[:t] + (c - 1,) + counts[t + 1:]
            for end in range(start + 1, n + 1):
                here = lat(start, end, t)
                if here >= out:
                    break
                out = min(out, max(here, best(end, rest)))
        return out

    return best(0, tuple(c for _, c in pool.sorted_specs()))


def brute_force_optimize(net: ChildNetwork, pool: FpgaPool, ts_fps: float,
                         latency_fn: StageLatencyFn | None = None) -> PipelinePlan:
    """Reference optimizer: every composition times every injective unit assignment."""
    if net.depth > BRUTE_FORCE_MAX_DEPTH or pool.total > BRUTE_FORCE_MAX_DEVICES:
        raise InstanceTooLarge(
            f"depth {net.depth} / {pool.total} devices exceeds the brute-force guard")
    if latency_fn is None:
        latency_fn = roofline_latency_fn()
    units = [DeviceSlot(spec, u) for spec, count in pool.devices for u in range(count)]
    best = best_plan = None
    n = net.depth
    for m in range(1, min(n, len(units)) + 1):
        for cuts in itertools.combinations(range(1, n), m - 1):
            bounds = (*cuts, n)
            for slots in itertools.permutations(units, m):
                ev = evaluate_plan(net, bounds, slots, ts_fps, pool=pool, latency_fn=latency_fn)
                if not ev.feasible:
                    continue
                key = _rank(ev, bounds, slots)
                if best is None or key < best:
                    best, best_plan = key, PipelinePlan(Partition(bounds), tuple(slots), ev)
    if best_plan is None:
        raise NoFeasiblePlan(f"no plan meets {ts_fps} FPS")
    return best_plan
