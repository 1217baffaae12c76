"""Run configuration: one YAML (or JSON) file, schema-validated before any work."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

import jsonschema
import yaml

from .core import CONV_CHAIN, FIXED1, MBCONV_CHAIN, PREDICTED, FpgaPool, FpgaSpec, SearchSpace, TensorShape
from .evaluator import CACHE_ONLY, EXTERNAL, SURROGATE, SurrogateParams
from .perf import PerfModelParams
from .search import SearchConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


_pos_int = {"type": "integer", "minimum": 1}
_pos_num = {"type": "number", "exclusiveMinimum": 0}
_int_set = {"type": "array", "items": _pos_int, "minItems": 1, "uniqueItems": True}

SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "space", "pool", "search"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "space": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "depth"],
            "properties": {
                "kind": {"enum": ["conv", "mbconv"]},
                "input": {"type": "array", "items": _pos_int, "minItems": 3, "maxItems": 3},
                "depth": {"oneOf": [_pos_int, {"type": "array", "items": _pos_int,
                                               "minItems": 2, "maxItems": 2}]},
                "filters": _int_set,
                "kernels": _int_set,
                "strides": {"type": "array", "items": {"enum": [1, 2]}, "minItems": 1, "uniqueItems": True},
                "expansions": {"type": "array", "items": {"enum": [3, 6]}, "minItems": 1, "uniqueItems": True},
                "stride_mode": {"enum": ["fixed1", "predicted"]},
            },
        },
        "pool": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["device", "count"],
                "properties": {
                    "count": {"type": "integer", "minimum": 0},
                    "device": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["name", "logic_cells", "onchip_memory_bits", "dsp_slices",
                                     "clock_hz", "link_bytes_per_sec"],
                        "properties": {
                            "name": {"type": "string", "minLength": 1},
                            "logic_cells": _pos_num,
                            "onchip_memory_bits": _pos_num,
                            "dsp_slices": _pos_num,
                            "clock_hz": _pos_num,
                            "link_bytes_per_sec": _pos_num,
                            "macs_per_dsp_per_cycle": _pos_num,
                        },
                    },
                },
            },
        },
        "perf": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "stage_overhead_sec": {"type": "number", "minimum": 0},
                "memory_counting": {"enum": ["InOutWeights"]},
            },
        },
        "evaluator": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"enum": [SURROGATE, EXTERNAL, CACHE_ONLY]},
                "command": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "timeout_sec": _pos_num,
                "cache": {"type": "string"},
                "surrogate": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "a_max": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                        "p0": _pos_num,
                        "depth_penalty": {"type": "number", "minimum": 0},
                        "knee": {"type": "integer", "minimum": 0},
                        "noise_sd": {"type": "number", "minimum": 0},
                    },
                },
            },
        },
        "search": {
            "type": "object",
            "additionalProperties": False,
            "required": ["ts_fps"],
            "properties": {
                "ts_fps": _pos_num,
                "beta": {"type": "number", "minimum": 0, "maximum": 1},
                "episodes": {"type": "integer", "minimum": 0},
                "children_per_episode": _pos_int,
                "fe_trials": _pos_int,
                "lr": _pos_num,
                "seed": {"type": "integer", "minimum": 0},
                "infeasible_reward": {"type": "number"},
                "hidden_size": _pos_int,
                "baseline_decay": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                "init_scale": {"type": "number", "minimum": 0},
                "fe_update": {"enum": ["per-trial", "batch"]},
                "checkpoint_every": {"type": "integer", "minimum": 0},
            },
        },
        "analysis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "samples": _pos_int,
                "max_enumeration": _pos_int,
            },
        },
        "output": {"type": "string"},
    },
}


@dataclass
class RunConfig:
    space: SearchSpace
    pool: FpgaPool
    perf: PerfModelParams
    search: SearchConfig
    evaluator: dict
    surrogate: SurrogateParams
    checkpoint_every: int
    samples: int
    max_enumeration: int
    output: Path
    raw: dict

    def with_seed(self, seed: int) -> "RunConfig":
        from dataclasses import replace

        return replace(self, search=replace(self.search, seed=seed))


def parse_config(raw: Any, base_dir: Path | None = None) -> RunConfig:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    base_dir = base_dir or Path.cwd()
    try:
        s = raw["space"]
        kind = CONV_CHAIN if s["kind"] == "conv" else MBCONV_CHAIN
        stride_mode = FIXED1 if s.get("stride_mode") == "fixed1" else PREDICTED
        defaults = SearchSpace.cifar() if kind == CONV_CHAIN else SearchSpace.imagenet()
        strides = s.get("strides", [1] if stride_mode == FIXED1 else [1, 2])
        depth = s["depth"] if isinstance(s["depth"], int) else tuple(s["depth"])
        space = SearchSpace(
            kind=kind,
            depth=depth,
            filter_choices=tuple(s.get("filters", defaults.filter_choices)),
            kernel_choices=tuple(s.get("kernels", defaults.kernel_choices)),
            stride_choices=tuple(strides),
            expansion_choices=tuple(s.get("expansions", (1,) if kind == CONV_CHAIN else (3, 6))),
            stride_mode=stride_mode,
            input_shape=TensorShape(*s["input"]) if "input" in s else defaults.input_shape,
        )
        pool = FpgaPool(tuple((FpgaSpec(**entry["device"]), entry["count"]) for entry in raw["pool"]))
        perf = PerfModelParams(**raw.get("perf", {}))
        search_raw = dict(raw["search"])
        checkpoint_every = search_raw.pop("checkpoint_every", 10)
        search = SearchConfig(**search_raw)
        ev = dict(raw.get("evaluator", {}))
        surrogate = SurrogateParams(**ev.get("surrogate", {}))
        if ev.get("source") == EXTERNAL and "command" not in ev:
            raise ConfigError("evaluator: external source needs a command")
        if "cache" in ev:
            ev["cache"] = str(base_dir / ev["cache"])
        analysis = raw.get("analysis", {})
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(space, pool, perf, search, ev, surrogate, checkpoint_every,
                     analysis.get("samples", 10_000), analysis.get("max_enumeration", 100_000),
                     base_dir / raw.get("output", "out"), raw)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    return parse_config(raw, path.parent)
