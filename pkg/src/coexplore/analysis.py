"""Design-space analyses and the partitioner oracle harness."""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import CONV, ChildNetwork, FpgaPool, FpgaSpec, LayerSpec, SearchSpace, TensorShape, canonical_key, count_params
from .partition import NoFeasiblePlan, PipelinePlan, brute_force_optimize, min_bottleneck_latency, optimize
from .perf import FEASIBILITY_TOL, StageLatencyFn


class SpaceTooLarge(ValueError):
    pass


def valid_fractions(space: SearchSpace, pool: FpgaPool, fps_list: Sequence[float], samples: int,
                    seed: int, latency_fn: StageLatencyFn | None = None) -> list[tuple[float, float]]:
    """Share of random architectures admitting a feasible plan, per throughput spec."""
    rng = np.random.default_rng(seed)
    bottlenecks = [min_bottleneck_latency(space.random_network(rng), pool, latency_fn)
                   for _ in range(samples)]
    rows = []
    for fps in sorted(fps_list):
        ok = sum(1 for b in bottlenecks if b * fps <= 1 + FEASIBILITY_TOL)
        rows.append((fps, ok / samples if samples else 0.0))
    return rows


def size_vs_efficiency(space: SearchSpace, pool: FpgaPool, ts_fps: float,
                       latency_fn: StageLatencyFn | None = None,
                       max_networks: int = 100_000) -> list[tuple[str, int, float]]:
    """Parameter count and best pipeline efficiency (0 when infeasible) for every network."""
    n = space.size()
    if n > max_networks:
        raise SpaceTooLarge(f"space has {n} networks, limit is {max_networks}")
    rows = []
    for net in space.enumerate():
        try:
            eff = optimize(net, pool, ts_fps, latency_fn).eval.avg_utilization
        except NoFeasiblePlan:
            eff = 0.0
        rows.append((canonical_key(net), count_params(net), eff))
    rows.sort(key=lambda r: r[0])
    return rows


@dataclass(frozen=True)
class Band:
    params_lo: int
    params_hi: int
    eff_min: float
    eff_max: float
    count: int

    @property
    def spread(self) -> float:
        return self.eff_max - self.eff_min


def widest_efficiency_band(rows: Sequence[tuple[str, int, float]], rel_width: float = 0.01) -> Band:
    """Parameter band ``[p, p * (1 + rel_width)]`` whose efficiencies span the most."""
    pts = sorted((params, eff) for _, params, eff in rows)
    params = [p for p, _ in pts]
    best = None
    for i, (lo, _) in enumerate(pts):
        j = bisect.bisect_right(params, lo * (1 + rel_width))
        effs = [e for _, e in pts[i:j]]
        band = Band(lo, params[j - 1], min(effs), max(effs), j - i)
        if best is None or band.spread > best.spread:
            best = band
    if best is None:
        raise ValueError("no rows")
    return best


class TableLatency:
    """Stub stage latency: per-device, per-layer table summed over the stage."""

    def __init__(self, table: dict[str, Sequence[float]], overhead: float = 0.0):
        self.table = {k: list(v) for k, v in table.items()}
        self.overhead = overhead

    def __call__(self, net: ChildNetwork, layers: range, dev: FpgaSpec) -> float:
        row = self.table[dev.name]
        return sum(row[i] for i in layers) + self.overhead


def placeholder_network(depth: int) -> ChildNetwork:
    return ChildNetwork(TensorShape(8, 8, 3), tuple(LayerSpec(CONV, 8, 3, 1) for _ in range(depth)))


def device(name: str) -> FpgaSpec:
    return FpgaSpec(name, 1, 1, 1, 1, 1)


@dataclass(frozen=True)
class Instance:
    net: ChildNetwork
    pool: FpgaPool
    ts_fps: float
    latency: TableLatency


def random_instance(rng: np.random.Generator, max_depth: int = 8, max_devices: int = 3) -> Instance:
    depth = int(rng.integers(1, max_depth + 1))
    n_types = int(rng.integers(1, max_devices + 1))
    total = int(rng.integers(n_types, max_devices + 1))
    counts = [1] * n_types
    for _ in range(total - n_types):
        counts[int(rng.integers(n_types))] += 1
    names = [f"dev{chr(ord('A') + t)}" for t in range(n_types)]
    pool = FpgaPool(tuple((device(nm), c) for nm, c in zip(names, counts)))
    table = {nm: rng.uniform(1e-3, 1e-2, size=depth).tolist() for nm in names}
    stages = int(rng.integers(1, total + 1))
    period = sum(table[names[0]]) / stages * rng.uniform(0.6, 1.6)
    return Instance(placeholder_network(depth), pool, 1.0 / period, TableLatency(table))


def _solve(fn, inst: Instance) -> PipelinePlan | None:
    try:
        return fn(inst.net, inst.pool, inst.ts_fps, inst.latency)
    except NoFeasiblePlan:
        return None


@dataclass
class VerifyReport:
    trials: int
    passed: int
    failed: int
    infeasible: int
    mismatches: list[int]

    @property
    def ok(self) -> bool:
        return self.failed == 0


def verify_partitioner(trials: int = 200, seed: int = 0,
                       optimizer: Callable[..., PipelinePlan] = optimize) -> VerifyReport:
    """Compare ``optimizer`` with the brute-force oracle on random guarded instances."""
    rng = np.random.default_rng(seed)
    report = VerifyReport(trials, 0, 0, 0, [])
    for i in range(trials):
        inst = random_instance(rng)
        fast = _solve(optimizer, inst)
        ref = _solve(brute_force_optimize, inst)
        if fast is None and ref is None:
            report.passed += 1
            report.infeasible += 1
            continue
        same = (fast is not None and ref is not None
                and fast.eval.avg_utilization == ref.eval.avg_utilization
                and all(s.utilization <= 1 + FEASIBILITY_TOL for s in fast.eval.stages))
        if same:
            report.passed += 1
        else:
            report.failed += 1
            report.mismatches.append(i)
    return report
