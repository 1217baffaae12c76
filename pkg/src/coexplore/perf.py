"""Roofline latency model and pipeline evaluation for multi-FPGA plans."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

from .core import ChildNetwork, FpgaPool, FpgaSpec, LayerSpec, TensorShape, count_macs, layer_params

# Slack applied to the U <= 1 throughput check.
FEASIBILITY_TOL = 1e-9

IN_OUT_WEIGHTS = "InOutWeights"


class InvalidPartition(ValueError):
    pass


class InvalidAssignment(ValueError):
    pass


@dataclass(frozen=True)
class PerfModelParams:
    stage_overhead_sec: float = 0.0
    memory_counting: str = IN_OUT_WEIGHTS

    def __post_init__(self):
        if self.stage_overhead_sec < 0:
            raise ValueError("stage_overhead_sec must be >= 0")
        if self.memory_counting != IN_OUT_WEIGHTS:
            raise ValueError(f"unsupported memory counting {self.memory_counting!r}")


@dataclass(frozen=True)
class StageEval:
    stage_index: int
    device: str
    latency_sec: float
    utilization: float


@dataclass(frozen=True)
class PlanEval:
    stages: tuple[StageEval, ...]
    avg_utilization: float
    feasible: bool
    throughput_fps: float


@dataclass(frozen=True)
class DeviceSlot:
    """One physical FPGA: the spec plus which unit of that spec in the pool."""

    spec: FpgaSpec
    unit: int = 0

    @property
    def name(self) -> str:
        return self.spec.name


# (net, layer index range, device) -> stage latency in seconds
StageLatencyFn = Callable[[ChildNetwork, range, FpgaSpec], float]


@lru_cache(maxsize=1 << 16)
def layer_latency(layer: LayerSpec, in_shape: TensorShape, dev: FpgaSpec,
                  params: PerfModelParams = PerfModelParams(), precision_bits: int = 16) -> float:
    """Roofline latency: the slower of compute and link transfer."""
    compute = count_macs(layer, in_shape) / dev.peak_macs_per_sec
    out_size = (-(-in_shape.height // layer.stride)) * (-(-in_shape.width // layer.stride)) * layer.filters
    elements = in_shape.size + out_size + layer_params(layer, in_shape.channels)
    memory = elements * precision_bits / 8 / dev.link_bytes_per_sec
    return max(compute, memory)


def stage_latency(layers: Sequence[tuple[LayerSpec, TensorShape]], dev: FpgaSpec,
                  params: PerfModelParams = PerfModelParams(), precision_bits: int = 16) -> float:
    if not layers:
        raise InvalidPartition("a stage needs at least one layer")
    total = sum(layer_latency(layer, shape, dev, params, precision_bits) for layer, shape in layers)
    return total + params.stage_overhead_sec


@lru_cache(maxsize=4096)
def _layer_inputs(net: ChildNetwork) -> list[TensorShape]:
    return net.layer_inputs()


def roofline_latency_fn(params: PerfModelParams = PerfModelParams()) -> StageLatencyFn:
    """Stage latency function backed by the roofline model."""

    def fn(net: ChildNetwork, layers: range, dev: FpgaSpec) -> float:
        inputs = _layer_inputs(net)
        members = [(net.layers[i], inputs[i]) for i in layers]
        return stage_latency(members, dev, params, net.precision_bits)

    return fn


def check_partition(bounds: Sequence[int], depth: int) -> None:
    if not bounds or bounds[-1] != depth:
        raise InvalidPartition(f"partition {tuple(bounds)} does not cover {depth} layers")
    prev = 0
    for b in bounds:
        if b <= prev:
            raise InvalidPartition(f"partition {tuple(bounds)} has an empty or unordered stage")
        prev = b


def check_assignment(assignment: Sequence[DeviceSlot], n_stages: int,
                     pool: FpgaPool | None = None) -> None:
    if len(assignment) != n_stages:
        raise InvalidAssignment(f"{len(assignment)} devices for {n_stages} stages")
    seen = set()
    for slot in assignment:
        ident = (slot.name, slot.unit)
        if ident in seen:
            raise InvalidAssignment(f"device {slot.name}#{slot.unit} used twice")
        seen.add(ident)
        if pool is not None:
            if slot.unit < 0 or slot.unit >= pool.count(slot.name):
                raise InvalidAssignment(f"device {slot.name}#{slot.unit} not available in pool")


def summarize(latencies: Sequence[float], devices: Sequence[str], ts_fps: float) -> PlanEval:
    stages = tuple(StageEval(i, d, lat, lat * ts_fps)
                   for i, (lat, d) in enumerate(zip(latencies, devices)))
    utils = [s.utilization for s in stages]
    return PlanEval(
        stages=stages,
        avg_utilization=sum(utils) / len(utils),
        feasible=all(u <= 1 + FEASIBILITY_TOL for u in utils),
        throughput_fps=1.0 / max(latencies),
    )


def evaluate_plan(net: ChildNetwork, bounds: Sequence[int], assignment: Sequence[DeviceSlot],
                  ts_fps: float, params: PerfModelParams = PerfModelParams(),
                  pool: FpgaPool | None = None, latency_fn: StageLatencyFn | None = None) -> PlanEval:
    """Latency and utilization of every stage of a partition/assignment pair.

    ``bounds`` holds the exclusive end index of each stage, so ``(1, 3, 5)``
    splits five layers into ``{l1} {l2, l3} {l4, l5}``.
    """
    check_partition(bounds, net.depth)
    check_assignment(assignment, len(bounds), pool)
    if latency_fn is None:
        latency_fn = roofline_latency_fn(params)
    starts = (0, *bounds[:-1])
    latencies = [latency_fn(net, range(s, e), slot.spec)
                 for s, e, slot in zip(starts, bounds, assignment)]
    return summarize(latencies, [slot.name for slot in assignment], ts_fps)
