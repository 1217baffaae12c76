"""Accuracy sources: a deterministic surrogate, a persistent history table, and
an external trainer reached over line-delimited JSON on a child process's
standard streams.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import subprocess
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from filelock import FileLock

from .core import ChildNetwork, canonical_key, count_params

log = logging.getLogger(__name__)

SURROGATE = "surrogate"
EXTERNAL = "external"
CACHE_ONLY = "cache-only"

DEFAULT_TIMEOUT_SEC = 24 * 3600.0


class EvaluatorError(RuntimeError):
    pass


class EvaluatorUnavailable(EvaluatorError):
    pass


class ProtocolError(EvaluatorError):
    pass


class EvaluatorTimeout(EvaluatorError, TimeoutError):
    pass


class CacheMiss(EvaluatorError, KeyError):
    pass


@dataclass(frozen=True)
class SurrogateParams:
    a_max: float = 0.9
    p0: float = 3e5
    depth_penalty: float = 0.004
    knee: int = 12
    noise_sd: float = 0.0

    def __post_init__(self):
        if not 0 < self.a_max <= 1:
            raise ValueError("a_max must be in (0, 1]")
        if self.p0 <= 0:
            raise ValueError("p0 must be positive")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")


def surrogate_accuracy(net: ChildNetwork, params: SurrogateParams = SurrogateParams(),
                       rng: np.random.Generator | None = None) -> float:
    """Saturating-in-size, depth-penalized stand-in for trained accuracy."""
    size_term = 1.0 - math.exp(-count_params(net) / params.p0)
    depth_term = max(0.0, 1.0 - params.depth_penalty * max(0, net.depth - params.knee))
    acc = params.a_max * size_term * depth_term
    if params.noise_sd > 0:
        if rng is None:
            rng = np.random.default_rng(zlib.crc32(canonical_key(net).encode()))
        acc += rng.normal(0.0, params.noise_sd)
    return min(1.0, max(0.0, acc))


class AccuracyCache:
    """History table ``canonical_key -> accuracy`` persisted as JSON lines.

    The file is append-only; on reload the last entry for a key wins.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, float] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        with self.path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    self._entries[rec["key"]] = float(rec["accuracy"])
                except (ValueError, KeyError, TypeError):
                    # A crash mid-append leaves at most one torn trailing line.
                    log.warning("skipping malformed cache line %d in %s", lineno, self.path)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> float | None:
        return self._entries.get(key)

    def put(self, key: str, accuracy: float) -> None:
        with self._lock:
            if self._entries.get(key) == accuracy:
                return
            self._entries[key] = accuracy
            if self.path is None:
                return
            self.path.parent.mkdir(parents=True, exist_ok=True)
            line = json.dumps({"key": key, "accuracy": accuracy}, separators=(",", ":")) + "\n"
            with FileLock(str(self.path) + ".lock"):
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(line)
                    fh.flush()

    def items(self):
        return self._entries.items()


class ExternalEvaluator:
    """Serial client for an external trainer speaking line-delimited JSON.

    Request:  ``{"id": 1, "input": [32, 32, 3], "layers": [[24, 3, 1, 1]]}``
    Response: ``{"id": 1, "accuracy": 0.84}``
    """

    def __init__(self, command: Sequence[str], timeout_sec: float = DEFAULT_TIMEOUT_SEC):
        self.command = list(command)
        self.timeout_sec = timeout_sec
        self._proc: subprocess.Popen | None = None
        self._lines: queue.Queue = queue.Queue()
        self._next_id = 1
        self._lock = threading.Lock()

    def _start(self) -> None:
        try:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, encoding="utf-8", bufsize=1)
        except OSError as exc:
            raise EvaluatorUnavailable(f"cannot start evaluator {self.command!r}: {exc}") from exc
        threading.Thread(target=self._pump, args=(self._proc.stdout, self._lines), daemon=True).start()

    @staticmethod
    def _pump(stream, lines: queue.Queue) -> None:
        for line in stream:
            lines.put(line)
        lines.put(None)

    def evaluate(self, net: ChildNetwork) -> float:
        with self._lock:
            if self._proc is None or self._proc.poll() is not None:
                self._lines = queue.Queue()
                self._start()
            req_id = self._next_id
            self._next_id += 1
            request = {"id": req_id, "input": net.input.as_list(),
                       "layers": [list(layer.as_tuple()) for layer in net.layers]}
            try:
                self._proc.stdin.write(json.dumps(request, separators=(",", ":")) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise EvaluatorUnavailable(f"evaluator pipe closed: {exc}") from exc
            try:
                line = self._lines.get(timeout=self.timeout_sec)
            except queue.Empty:
                self._proc.kill()
                self.close()
                raise EvaluatorTimeout(f"no response within {self.timeout_sec} s") from None
            if line is None:
                raise EvaluatorUnavailable("evaluator exited before responding")
            return parse_response(line, req_id)

    def close(self) -> None:
        if self._proc is None:
            return
        proc, self._proc = self._proc, None
        try:
            proc.stdin.close()
        except OSError:
            pass
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def parse_response(line: str, expected_id: int) -> float:
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed response line: {line!r}") from exc
    if not isinstance(msg, dict) or "id" not in msg or "accuracy" not in msg:
        raise ProtocolError(f"response lacks id/accuracy: {line!r}")
    if msg["id"] != expected_id:
        raise ProtocolError(f"response id {msg['id']!r} does not match request id {expected_id}")
    acc = msg["accuracy"]
    if isinstance(acc, bool) or not isinstance(acc, (int, float)) or not 0.0 <= acc <= 1.0:
        raise ProtocolError(f"accuracy {acc!r} outside [0, 1]")
    return float(acc)


class Evaluator:
    """Cache-aware accuracy provider.

    A cache hit never touches the source; a miss calls it and writes through.
    """

    def __init__(self, source: str = SURROGATE, cache: AccuracyCache | None = None,
                 surrogate: SurrogateParams = SurrogateParams(),
                 external: ExternalEvaluator | None = None):
        if source not in (SURROGATE, EXTERNAL, CACHE_ONLY):
            raise ValueError(f"unknown accuracy source {source!r}")
        if source == EXTERNAL and external is None:
            raise EvaluatorUnavailable("external source selected but no evaluator command configured")
        self.source = source
        self.cache = cache if cache is not None else AccuracyCache()
        self.surrogate = surrogate
        self.external = external
        self.calls = 0

    def __call__(self, net: ChildNetwork) -> float:
        key = canonical_key(net)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        if self.source == CACHE_ONLY:
            raise CacheMiss(key)
        self.calls += 1
        if self.source == SURROGATE:
            acc = surrogate_accuracy(net, self.surrogate)
        else:
            acc = self.external.evaluate(net)
        self.cache.put(key, acc)
        return acc

    evaluate = __call__

    def close(self) -> None:
        if self.external is not None:
            self.external.close()


def evaluate(net: ChildNetwork, source: str, cache: AccuracyCache,
             surrogate: SurrogateParams = SurrogateParams(),
             external: ExternalEvaluator | None = None) -> float:
    return Evaluator(source, cache, surrogate, external)(net)
