"""Joint neural-architecture and multi-FPGA pipeline co-exploration."""

from .controller import Controller, EmaBaseline, GroupingPlan, Snapshot, Trajectory, init_controller, space_size
from .core import (
    ChildNetwork,
    FpgaPool,
    FpgaSpec,
    LayerSpec,
    SearchSpace,
    TensorShape,
    XC7Z015,
    canonical_key,
    count_macs,
    count_params,
    derive_shapes,
)
from .evaluator import AccuracyCache, Evaluator, ExternalEvaluator, SurrogateParams, surrogate_accuracy
from .partition import (
    NoFeasiblePlan,
    Partition,
    PipelinePlan,
    brute_force_optimize,
    enumerate_partitions,
    optimize,
)
from .perf import (
    PerfModelParams,
    PlanEval,
    StageEval,
    evaluate_plan,
    layer_latency,
    roofline_latency_fn,
    stage_latency,
)
from .search import (
    DesignPoint,
    ParetoArchive,
    SearchConfig,
    combined_reward,
    fast_explore,
    run_search,
    slow_explore_episode,
    stage_reward,
)
from .config import ConfigError, RunConfig, load_config

__version__ = "0.1.0"
