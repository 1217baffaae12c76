"""Two-level co-exploration loop and the Pareto archive it fills.

Fast exploration fixes a pipeline structure for a seed network, regroups the
controller per stage and refines the seed towards higher stage utilization
without any training. Slow exploration evaluates the refined children for
accuracy and updates the fused controller with a blended reward.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .controller import Controller, EmaBaseline, Trajectory, init_controller
from .core import ChildNetwork, FpgaPool, SearchSpace, canonical_key, network_from_key
from .evaluator import Evaluator
from .partition import NoFeasiblePlan, PipelinePlan, least_loaded_plan, optimize
from .perf import StageLatencyFn, evaluate_plan, roofline_latency_fn

log = logging.getLogger(__name__)


FE_UPDATE_MODES = ("per-trial", "batch")


class EmptyArchive(LookupError):
    pass


def stage_reward(u: float) -> float:
    """Reward for one pipeline stage at utilization ``u``."""
    if u <= 1:
        return u
    if u <= 2:
        return 1 - u
    return -1.0


def combined_reward(a: float, u: float, beta: float) -> float:
    return beta * a + (1 - beta) * u


@dataclass(frozen=True)
class SearchConfig:
    ts_fps: float
    beta: float = 0.5
    episodes: int = 10_000
    children_per_episode: int = 16
    fe_trials: int = 100
    lr: float = 0.0006
    seed: int = 0
    infeasible_reward: float = -1.0
    hidden_size: int = 64
    baseline_decay: float | None = 0.95
    init_scale: float = 0.1
    fe_update: str = "per-trial"  # or "batch": one update over all FE trials

    def __post_init__(self):
        if self.fe_update not in FE_UPDATE_MODES:
            raise ValueError(f"fe_update must be one of {FE_UPDATE_MODES}")
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must be in [0, 1]")
        if self.ts_fps <= 0:
            raise ValueError("ts_fps must be positive")
        if self.episodes < 0 or self.children_per_episode < 1 or self.fe_trials < 1:
            raise ValueError("episodes >= 0, children_per_episode >= 1 and fe_trials >= 1 required")
        if self.hidden_size < 1:
            raise ValueError("hidden_size must be >= 1")


@dataclass(frozen=True)
class DesignPoint:
    net: ChildNetwork
    plan: PipelinePlan
    accuracy: float

    @property
    def efficiency(self) -> float:
        return self.plan.eval.avg_utilization

    @property
    def key(self) -> str:
        return canonical_key(self.net)

    def objectives(self) -> tuple[float, float]:
        return (self.accuracy, self.efficiency)

    def to_dict(self) -> dict:
        return {"key": self.key, "accuracy": self.accuracy, "efficiency": self.efficiency,
                "plan": self.plan.to_dict()}

    @classmethod
    def from_dict(cls, d: dict, pool: FpgaPool) -> "DesignPoint":
        return cls(network_from_key(d["key"]), PipelinePlan.from_dict(d["plan"], pool), d["accuracy"])


def dominates(a: tuple[float, float], b: tuple[float, float]) -> bool:
    return a[0] >= b[0] and a[1] >= b[1] and (a[0] > b[0] or a[1] > b[1])


def hypervolume(points: Iterable[tuple[float, float]], ref: tuple[float, float] = (0.0, 0.0)) -> float:
    """Area dominated by ``points`` (both objectives maximized) above ``ref``."""
    pts = sorted(((a, u) for a, u in points if a > ref[0] and u > ref[1]), key=lambda p: (-p[0], -p[1]))
    area = 0.0
    best_u = ref[1]
    for a, u in pts:
        if u > best_u:
            area += (a - ref[0]) * (u - best_u)
            best_u = u
    return area


class ParetoArchive:
    """Non-dominated set of design points over (accuracy, efficiency)."""

    def __init__(self, points: Iterable[DesignPoint] = ()):
        self.points: list[DesignPoint] = []
        for p in points:
            self.update(p)

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def update(self, point: DesignPoint) -> bool:
        """Insert ``point`` unless dominated; drop the points it dominates."""
        obj = point.objectives()
        key = point.key
        for p in self.points:
            if p.key == key or dominates(p.objectives(), obj):
                return False
        self.points = [p for p in self.points if not dominates(obj, p.objectives())]
        self.points.append(point)
        return True

    def opt_sw(self) -> DesignPoint:
        if not self.points:
            raise EmptyArchive("archive is empty")
        return max(self.points, key=lambda p: (p.accuracy, p.efficiency))

    def opt_hw(self) -> DesignPoint:
        if not self.points:
            raise EmptyArchive("archive is empty")
        return max(self.points, key=lambda p: (p.efficiency, p.accuracy))

    def hypervolume(self, ref: tuple[float, float] = (0.0, 0.0)) -> float:
        return hypervolume((p.objectives() for p in self.points), ref)

    def sorted_points(self) -> list[DesignPoint]:
        return sorted(self.points, key=lambda p: (-p.accuracy, -p.efficiency, p.key))

    def to_dict(self) -> dict:
        pts = self.sorted_points()
        out = {"points": [p.to_dict() for p in pts], "opt_sw": None, "opt_hw": None,
               "hypervolume": self.hypervolume()}
        if pts:
            out["opt_sw"] = self.opt_sw().key
            out["opt_hw"] = self.opt_hw().key
        return out


def pareto_update(archive: ParetoArchive, point: DesignPoint) -> ParetoArchive:
    archive.update(point)
    return archive


@dataclass
class FastResult:
    net: ChildNetwork
    plan: PipelinePlan
    structure: PipelinePlan  # the fixed plan the trials were scored against
    trials: int


def fast_explore(seed_net: ChildNetwork, ctrl: Controller, pool: FpgaPool, cfg: SearchConfig,
                 rng: np.random.Generator, latency_fn: StageLatencyFn | None = None) -> FastResult:
    """Refine ``seed_net`` for pipeline efficiency on a fixed stage structure.

    The caller owns the controller snapshot; this mutates ``ctrl``.
    """
    if latency_fn is None:
        latency_fn = roofline_latency_fn()
    try:
        structure = optimize(seed_net, pool, cfg.ts_fps, latency_fn)
    except NoFeasiblePlan:
        # Keep the least-loaded layout so refinement can still pull the seed under the period.
        structure = least_loaded_plan(seed_net, pool, cfg.ts_fps, latency_fn)
    bounds = structure.partition.bounds
    slots = structure.assignment
    grouping = ctrl.regroup(structure.partition)
    baseline = EmaBaseline(cfg.baseline_decay)

    best_net, best_u = None, -1.0
    if structure.eval.feasible:
        best_net, best_u = seed_net, structure.eval.avg_utilization
    pending = []
    for _ in range(cfg.fe_trials):
        net, traj = ctrl.sample(grouping, rng)
        ev = evaluate_plan(net, bounds, slots, cfg.ts_fps, latency_fn=latency_fn)
        rewards = [stage_reward(s.utilization) for s in ev.stages]
        if cfg.fe_update == "batch":
            pending.append((traj, rewards))
        else:
            ctrl.reinforce_step(grouping, [(traj, rewards)], baseline, lr=cfg.lr)
        if ev.feasible and ev.avg_utilization > best_u:
            best_net, best_u = net, ev.avg_utilization
    if pending:
        ctrl.reinforce_step(grouping, pending, baseline, lr=cfg.lr)
    if best_net is None:
        raise NoFeasiblePlan(f"no refinement of {canonical_key(seed_net)} meets {cfg.ts_fps} FPS")
    plan = optimize(best_net, pool, cfg.ts_fps, latency_fn)
    return FastResult(best_net, plan, structure, cfg.fe_trials)


@dataclass
class EpisodeReport:
    episode: int
    records: list[dict]
    snapshot_digest: str
    pre_update_digest: str
    archive_size: int


@dataclass
class SearchState:
    ctrl: Controller
    rng: np.random.Generator
    baseline: EmaBaseline
    archive: ParetoArchive = field(default_factory=ParetoArchive)
    episode: int = 0


def _actions_trajectory(ctrl: Controller, net: ChildNetwork) -> Trajectory:
    actions = tuple(ctrl.space.layer_to_indices(layer) for layer in net.layers)
    return Trajectory(actions, (), ctrl.fused().layer_to_group)


def slow_explore_episode(state: SearchState, pool: FpgaPool, evaluator: Callable[[ChildNetwork], float],
                         cfg: SearchConfig, latency_fn: StageLatencyFn | None = None) -> EpisodeReport:
    ctrl = state.ctrl
    snap = ctrl.snapshot()
    fused = ctrl.fused()
    seeds = [ctrl.sample(fused, state.rng)[0] for _ in range(cfg.children_per_episode)]

    refined: list[FastResult | None] = []
    for seed_net in seeds:
        ctrl.restore(snap)
        try:
            refined.append(fast_explore(seed_net, ctrl, pool, cfg, state.rng, latency_fn))
        except NoFeasiblePlan:
            refined.append(None)
    ctrl.restore(snap)
    pre_update = ctrl.param_digest()

    records = []
    batch = []
    for seed_net, fe in zip(seeds, refined):
        if fe is None:
            net, reward = seed_net, cfg.infeasible_reward
            rec = {"episode": state.episode, "key": canonical_key(seed_net), "accuracy": None,
                   "efficiency": None, "reward": reward, "feasible": False, "plan": None}
        else:
            net = fe.net
            acc = evaluator(net)
            eff = fe.plan.eval.avg_utilization
            reward = combined_reward(acc, eff, cfg.beta)
            state.archive.update(DesignPoint(net, fe.plan, acc))
            rec = {"episode": state.episode, "key": canonical_key(net), "accuracy": acc,
                   "efficiency": eff, "reward": reward, "feasible": True, "plan": fe.plan.to_dict()}
        batch.append((_actions_trajectory(ctrl, net), [reward]))
        records.append(rec)
    # one fused update for the whole episode, children in seed order
    ctrl.reinforce_step(fused, batch, state.baseline, lr=cfg.lr)

    report = EpisodeReport(state.episode, records, snap.param_digest(), pre_update, len(state.archive))
    state.episode += 1
    return report


def new_state(cfg: SearchConfig, space: SearchSpace) -> SearchState:
    ctrl = init_controller(space, space.max_depth, cfg.hidden_size, seed=cfg.seed,
                           init_scale=cfg.init_scale, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    return SearchState(ctrl, rng, EmaBaseline(cfg.baseline_decay))


def run_search(cfg: SearchConfig, pool: FpgaPool, space: SearchSpace,
               evaluator: Callable[[ChildNetwork], float] | None = None,
               latency_fn: StageLatencyFn | None = None, state: SearchState | None = None,
               on_episode: Callable[[SearchState, EpisodeReport], None] | None = None,
               ) -> tuple[ParetoArchive, list[dict]]:
    """Run ``cfg.episodes`` episodes (continuing ``state`` when given)."""
    if evaluator is None:
        evaluator = Evaluator()
    if latency_fn is None:
        latency_fn = roofline_latency_fn()
    if state is None:
        state = new_state(cfg, space)
    run_log: list[dict] = []
    while state.episode < cfg.episodes:
        report = slow_explore_episode(state, pool, evaluator, cfg, latency_fn)
        run_log.extend(report.records)
        if on_episode is not None:
            on_episode(state, report)
        log.debug("episode %d: archive %d points, hv %.4f", report.episode, report.archive_size,
                  state.archive.hypervolume())
    return state.archive, run_log


def random_search(space: SearchSpace, pool: FpgaPool, ts_fps: float, budget: int, seed: int,
                  evaluator: Callable[[ChildNetwork], float] | None = None,
                  latency_fn: StageLatencyFn | None = None) -> ParetoArchive:
    """Baseline: ``budget`` uniformly sampled children, each with its optimal plan."""
    if evaluator is None:
        evaluator = Evaluator()
    rng = np.random.default_rng(seed)
    archive = ParetoArchive()
    for _ in range(budget):
        net = space.random_network(rng, space.max_depth)
        try:
            plan = optimize(net, pool, ts_fps, latency_fn)
        except NoFeasiblePlan:
            continue
        archive.update(DesignPoint(net, plan, evaluator(net)))
    return archive


def exhaustive_frontier(space: SearchSpace, pool: FpgaPool, ts_fps: float,
                        evaluator: Callable[[ChildNetwork], float] | None = None,
                        latency_fn: StageLatencyFn | None = None) -> ParetoArchive:
    """True Pareto frontier of an enumerable space."""
    if evaluator is None:
        evaluator = Evaluator()
    archive = ParetoArchive()
    for net in space.enumerate(space.max_depth):
        try:
            plan = optimize(net, pool, ts_fps, latency_fn)
        except NoFeasiblePlan:
            continue
        archive.update(DesignPoint(net, plan, evaluator(net)))
    return archive
