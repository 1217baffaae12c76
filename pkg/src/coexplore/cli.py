"""Command-line front end.

Subcommands::

    coexplore run --config cfg.yaml [--seed N] [--out DIR] [--resume]
    coexplore analyze-validity --config cfg.yaml [--fps-list 20,35,60,100] [--out FILE]
    coexplore analyze-size-eff --config cfg.yaml [--out FILE]
    coexplore verify-partitioner [--trials 200] [--seed 0]

Exit codes: 0 success, 1 partitioner mismatch, 2 configuration error,
3 evaluator failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .analysis import SpaceTooLarge, size_vs_efficiency, valid_fractions, verify_partitioner
from .config import ConfigError, RunConfig, load_config
from .controller import EmaBaseline, Snapshot
from .evaluator import AccuracyCache, Evaluator, EvaluatorError, ExternalEvaluator, DEFAULT_TIMEOUT_SEC
from .perf import roofline_latency_fn
from .search import DesignPoint, EpisodeReport, ParetoArchive, SearchState, new_state, run_search

log = logging.getLogger("coexplore")

EXIT_MISMATCH = 1
EXIT_CONFIG = 2
EXIT_EVALUATOR = 3

CHECKPOINT_DIR = "checkpoints"


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def _write_csv(header: Sequence[str], rows, out: str | None) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    if out is None:
        sys.stdout.write(buf.getvalue())
    else:
        Path(out).write_text(buf.getvalue(), encoding="utf-8", newline="\n")


def build_evaluator(cfg: RunConfig) -> Evaluator:
    ev = cfg.evaluator
    cache = AccuracyCache(ev.get("cache"))
    external = None
    if "command" in ev:
        external = ExternalEvaluator(ev["command"], ev.get("timeout_sec", DEFAULT_TIMEOUT_SEC))
    return Evaluator(ev.get("source", "surrogate"), cache, cfg.surrogate, external)


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(out_dir: Path, state: SearchState) -> Path:
    ckpt_dir = out_dir / CHECKPOINT_DIR
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    stem = ckpt_dir / f"episode_{state.episode:06d}"
    stem.with_suffix(".bin").write_bytes(state.ctrl.snapshot().to_bytes())
    meta = {
        "episode": state.episode,
        "rng": state.rng.bit_generator.state,
        "baseline": {"decay": state.baseline.decay, "values": state.baseline.values},
        "archive": [p.to_dict() for p in state.archive.points],
    }
    stem.with_suffix(".json").write_text(_dump(meta), encoding="utf-8")
    return stem


def latest_checkpoint(out_dir: Path) -> Path | None:
    stems = sorted(p.with_suffix("") for p in (out_dir / CHECKPOINT_DIR).glob("episode_*.json"))
    stems = [s for s in stems if s.with_suffix(".bin").exists()]
    return stems[-1] if stems else None


def load_checkpoint(stem: Path, cfg: RunConfig) -> SearchState:
    state = new_state(cfg.search, cfg.space)
    state.ctrl.restore(Snapshot.from_bytes(stem.with_suffix(".bin").read_bytes()))
    meta = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
    state.rng = np.random.default_rng()
    state.rng.bit_generator.state = meta["rng"]
    state.baseline = EmaBaseline(meta["baseline"]["decay"], dict(meta["baseline"]["values"]))
    state.archive = ParetoArchive(DesignPoint.from_dict(d, cfg.pool) for d in meta["archive"])
    state.episode = meta["episode"]
    return state


# -- commands ----------------------------------------------------------------------


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_run(args) -> int:
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out) if args.out else cfg.output
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "log.jsonl"

    state = None
    if args.resume:
        stem = latest_checkpoint(out_dir)
        if stem is not None:
            state = load_checkpoint(stem, cfg)
            log.info("resuming from %s", stem.name)
    if state is None:
        log_path.write_text("", encoding="utf-8")
    else:
        kept = [line for line in log_path.read_text(encoding="utf-8").splitlines(keepends=True)
                if json.loads(line)["episode"] < state.episode] if log_path.exists() else []
        log_path.write_text("".join(kept), encoding="utf-8")

    evaluator = build_evaluator(cfg)
    every = cfg.checkpoint_every

    def on_episode(st: SearchState, report: EpisodeReport) -> None:
        with log_path.open("a", encoding="utf-8") as fh:
            for rec in report.records:
                fh.write(_dump(rec) + "\n")
        if every and st.episode % every == 0:
            save_checkpoint(out_dir, st)

    if state is None:
        state = new_state(cfg.search, cfg.space)
    try:
        archive, _ = run_search(cfg.search, cfg.pool, cfg.space, evaluator,
                                roofline_latency_fn(cfg.perf), state=state, on_episode=on_episode)
    except EvaluatorError as exc:
        print(f"evaluator failure: {exc}", file=sys.stderr)
        return EXIT_EVALUATOR
    finally:
        evaluator.close()

    if every:
        save_checkpoint(out_dir, state)
    doc = {"ts_fps": cfg.search.ts_fps, "beta": cfg.search.beta, "episodes": cfg.search.episodes,
           "seed": cfg.search.seed, **archive.to_dict()}
    (out_dir / "archive.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    log.info("archive: %d points, hypervolume %.4f", len(archive), archive.hypervolume())
    return 0


def cmd_analyze_validity(args) -> int:
    try:
        cfg = _load(args)
        fps_list = [float(v) for v in args.fps_list.split(",") if v.strip()]
        if not fps_list or min(fps_list) <= 0:
            raise ConfigError("--fps-list needs positive rates")
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rows = valid_fractions(cfg.space, cfg.pool, fps_list, cfg.samples, cfg.search.seed,
                           roofline_latency_fn(cfg.perf))
    _write_csv(["fps", "valid_fraction"], [(f"{fps:g}", repr(frac)) for fps, frac in rows], args.out)
    return 0


def cmd_analyze_size_eff(args) -> int:
    try:
        cfg = _load(args)
        rows = size_vs_efficiency(cfg.space, cfg.pool, cfg.search.ts_fps,
                                  roofline_latency_fn(cfg.perf), cfg.max_enumeration)
    except (ConfigError, SpaceTooLarge) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _write_csv(["key", "params", "best_efficiency"], [(k, p, repr(e)) for k, p, e in rows], args.out)
    return 0


def cmd_verify_partitioner(args) -> int:
    report = verify_partitioner(args.trials, args.seed)
    print(f"trials={report.trials} passed={report.passed} failed={report.failed} "
          f"infeasible={report.infeasible}")
    if not report.ok:
        print(f"mismatching trials: {report.mismatches}", file=sys.stderr)
        return EXIT_MISMATCH
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coexplore", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the co-exploration search")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("analyze-validity", help="valid-architecture fraction per throughput spec")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--fps-list", default="20,35,60,100")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_analyze_validity)

    p = sub.add_parser("analyze-size-eff", help="parameter count vs best pipeline efficiency")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_analyze_size_eff)

    p = sub.add_parser("verify-partitioner", help="check the optimizer against brute force")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify_partitioner)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("COEX_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
