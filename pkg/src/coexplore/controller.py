"""Reconfigurable recurrent controller.

Every layer of the child network owns one tanh recurrent cell. Cells are
gathered into groups: one group per pipeline stage during fast exploration, or
a single fused group during slow exploration. A group evaluates with the
element-wise mean of its members' parameters and runs as one recurrent
sequence over its members' decisions (filter -> kernel -> stride
(-> expansion) per layer), feeding the previous decision back as an embedded
token. Updates to a group are applied to every member cell.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import ChildNetwork, SearchSpace
from .partition import Partition

PER_STAGE = "PerStage"
FUSED = "Fused"

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class IncompatibleTrajectory(ValueError):
    pass


@dataclass(frozen=True)
class GroupingPlan:
    layer_to_group: tuple[int, ...]
    mode: str = PER_STAGE

    @classmethod
    def fused(cls, depth: int) -> "GroupingPlan":
        return cls((0,) * depth, FUSED)

    @property
    def n_groups(self) -> int:
        return max(self.layer_to_group) + 1

    def members(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.n_groups)]
        for layer, g in enumerate(self.layer_to_group):
            out[g].append(layer)
        return out


@dataclass(frozen=True)
class Trajectory:
    actions: tuple[tuple[int, ...], ...]  # per layer, per decision
    log_probs: tuple[tuple[float, ...], ...]
    groups: tuple[int, ...]  # group of each layer

    @property
    def total_log_prob(self) -> float:
        return float(sum(sum(row) for row in self.log_probs))


@dataclass
class Snapshot:
    arrays: dict[str, np.ndarray]

    def to_bytes(self) -> bytes:
        """Shape header line (JSON) followed by little-endian float64 data."""
        names = sorted(self.arrays)
        header = {"format": "coexplore-snapshot", "version": 1,
                  "arrays": [[n, list(self.arrays[n].shape)] for n in names]}
        buf = io.BytesIO()
        buf.write(json.dumps(header, separators=(",", ":")).encode() + b"\n")
        for n in names:
            buf.write(np.ascontiguousarray(self.arrays[n], dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Snapshot":
        head, _, body = data.partition(b"\n")
        header = json.loads(head)
        if header.get("format") != "coexplore-snapshot":
            raise ValueError("not a controller snapshot")
        arrays = {}
        offset = 0
        for name, shape in header["arrays"]:
            n = math.prod(shape)
            arrays[name] = np.frombuffer(body, dtype="<f8", count=n, offset=offset * 8).reshape(shape).copy()
            offset += n
        if offset * 8 != len(body):
            raise ValueError("snapshot payload length mismatch")
        return cls(arrays)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def param_digest(self) -> str:
        """Digest of the parameters only; matches ``Controller.param_digest``."""
        h = hashlib.sha256()
        for k in sorted(a for a in self.arrays if a.startswith("param/")):
            h.update(np.ascontiguousarray(self.arrays[k]).tobytes())
        return h.hexdigest()


@dataclass
class EmaBaseline:
    """Per-group exponential moving average of rewards, starting at 0.

    ``decay=None`` disables the baseline (plain REINFORCE).
    """

    decay: float | None = 0.95
    values: dict[str, float] = field(default_factory=dict)

    def get(self, key: str) -> float:
        if self.decay is None:
            return 0.0
        return self.values.get(key, 0.0)

    def update(self, key: str, reward: float) -> None:
        if self.decay is None:
            return
        self.values[key] = self.decay * self.values.get(key, 0.0) + (1 - self.decay) * reward


class Controller:
    """Per-layer recurrent cells with grouping, sampling and policy-gradient updates."""

    def __init__(self, space: SearchSpace, depth: int, hidden: int, params: dict[str, np.ndarray],
                 lr: float = 0.0006, optimizer: str = "adam"):
        if optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {optimizer!r}")
        self.space = space
        self.depth = depth
        self.hidden = hidden
        self.lr = lr
        self.optimizer = optimizer
        self.decisions = space.decisions()
        self.head_sizes = [len(c) for _, c in self.decisions]
        self.token_offset = [int(x) for x in np.cumsum([1] + self.head_sizes[:-1])]
        self.params = params
        self.adam_m = {k: np.zeros_like(v) for k, v in params.items()}
        self.adam_v = {k: np.zeros_like(v) for k, v in params.items()}
        self.adam_t = np.zeros(depth)

    # -- structure -----------------------------------------------------------------

    def head_names(self) -> list[str]:
        return [name for name, _ in self.decisions]

    def regroup(self, partition: Partition) -> GroupingPlan:
        if partition.depth != self.depth:
            raise ValueError(f"partition covers {partition.depth} layers, controller has {self.depth}")
        return GroupingPlan(tuple(partition.stage_of()), PER_STAGE)

    def fused(self) -> GroupingPlan:
        return GroupingPlan.fused(self.depth)

    def group_params(self, members: Sequence[int]) -> dict[str, np.ndarray]:
        idx = list(members)
        if len(idx) == 1:
            return {k: v[idx[0]].copy() for k, v in self.params.items()}
        return {k: v[idx].mean(axis=0) for k, v in self.params.items()}

    def _check_grouping(self, grouping: GroupingPlan) -> None:
        if len(grouping.layer_to_group) != self.depth:
            raise ValueError("grouping does not match controller depth")

    # -- forward / backward --------------------------------------------------------

    def _run(self, p: dict[str, np.ndarray], actions: Sequence[Sequence[int]] | None,
             n_layers: int, rng: np.random.Generator | None, want_cache: bool):
        """Run one group sequence; sample when ``actions`` is None."""
        h = np.zeros(self.hidden)
        token = 0
        Wh, emb, bh = p["Wh"], p["emb"], p["bh"]
        heads = [(p[f"W_{name}"], p[f"b_{name}"]) for name in self.head_names()]
        chosen, logps, cache = [], [], []
        for layer in range(n_layers):
            row_a, row_lp = [], []
            for d, (W, b) in enumerate(heads):
                h_prev = h
                h = np.tanh(Wh @ h_prev + emb[token] + bh)
                logits = W @ h + b
                shift = logits - logits.max()
                logz = math.log(np.exp(shift).sum())
                logp = shift - logz
                if actions is None:
                    if len(logp) > 1:
                        cdf = np.cumsum(np.exp(logp))
                        a = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")),
                                len(logp) - 1)
                    else:
                        a = 0
                else:
                    a = int(actions[layer][d])
                row_a.append(a)
                row_lp.append(float(logp[a]))
                if want_cache:
                    cache.append((d, token, h_prev, h, np.exp(logp), a))
                token = self.token_offset[d] + a
            chosen.append(tuple(row_a))
            logps.append(tuple(row_lp))
        return chosen, logps, cache

    def sequence_log_prob(self, params: dict[str, np.ndarray], actions: Sequence[Sequence[int]]) -> float:
        """Log-probability of one group's decisions under explicit group parameters."""
        _, lp, _ = self._run(params, actions, len(actions), None, want_cache=False)
        return float(sum(sum(row) for row in lp))

    def _backward(self, p: dict[str, np.ndarray], cache) -> dict[str, np.ndarray]:
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        names = self.head_names()
        Wh = p["Wh"]
        dh_next = np.zeros(self.hidden)
        for d, token, h_prev, h, probs, a in reversed(cache):
            dlogits = -probs
            dlogits[a] += 1.0
            grads[f"W_{names[d]}"] += np.outer(dlogits, h)
            grads[f"b_{names[d]}"] += dlogits
            dh = p[f"W_{names[d]}"].T @ dlogits + dh_next
            da = dh * (1.0 - h * h)
            grads["Wh"] += np.outer(da, h_prev)
            grads["bh"] += da
            grads["emb"][token] += da
            dh_next = Wh.T @ da
        return grads

    def sample(self, grouping: GroupingPlan, rng: np.random.Generator) -> tuple[ChildNetwork, Trajectory]:
        self._check_grouping(grouping)
        actions: list[tuple[int, ...]] = [()] * self.depth
        logps: list[tuple[float, ...]] = [()] * self.depth
        for members in grouping.members():
            p = self.group_params(members)
            a, lp, _ = self._run(p, None, len(members), rng, want_cache=False)
            for layer, row_a, row_lp in zip(members, a, lp):
                actions[layer] = row_a
                logps[layer] = row_lp
        traj = Trajectory(tuple(actions), tuple(logps), grouping.layer_to_group)
        return self.space.network(actions), traj

    def trajectory_for(self, net: ChildNetwork, grouping: GroupingPlan) -> Trajectory:
        """Trajectory that would have produced ``net`` under ``grouping``."""
        actions = tuple(self.space.layer_to_indices(layer) for layer in net.layers)
        if len(actions) != self.depth:
            raise IncompatibleTrajectory(f"network depth {len(actions)} != controller depth {self.depth}")
        lp, _ = self.log_prob_and_grad(grouping, Trajectory(actions, (), grouping.layer_to_group),
                                       with_grad=False, per_decision=True)
        return Trajectory(actions, lp, grouping.layer_to_group)

    def _validate(self, traj: Trajectory) -> None:
        if len(traj.actions) != self.depth:
            raise IncompatibleTrajectory(f"trajectory has {len(traj.actions)} layers, expected {self.depth}")
        for row in traj.actions:
            if len(row) != len(self.head_sizes):
                raise IncompatibleTrajectory("decision count per layer does not match the space")
            for a, n in zip(row, self.head_sizes):
                if not 0 <= a < n:
                    raise IncompatibleTrajectory(f"action {a} outside head of width {n}")

    def log_prob_and_grad(self, grouping: GroupingPlan, traj: Trajectory, with_grad: bool = True,
                          per_decision: bool = False):
        """Log-probability of ``traj`` per group and its gradient w.r.t. each group's parameters.

        Returns ``(log_probs, grads)``: ``log_probs[g]`` is a float and ``grads[g]``
        a dict shaped like one cell's parameters (None when ``with_grad`` is off).
        With ``per_decision`` the first element is instead the per-layer,
        per-decision log-probability table.
        """
        self._check_grouping(grouping)
        self._validate(traj)
        group_lp: list[float] = []
        grads: list[dict[str, np.ndarray] | None] = []
        table: list[tuple[float, ...]] = [()] * self.depth
        for members in grouping.members():
            p = self.group_params(members)
            acts = [traj.actions[layer] for layer in members]
            _, lp, cache = self._run(p, acts, len(members), None, want_cache=with_grad)
            for layer, row in zip(members, lp):
                table[layer] = row
            group_lp.append(float(sum(sum(row) for row in lp)))
            grads.append(self._backward(p, cache) if with_grad else None)
        if per_decision:
            return tuple(table), grads
        return group_lp, grads

    # -- updates -------------------------------------------------------------------

    def reinforce_step(self, grouping: GroupingPlan, batch: Sequence[tuple[Trajectory, Sequence[float]]],
                       baseline: EmaBaseline, lr: float | None = None, keys: Sequence[str] | None = None) -> None:
        """One ascent step on ``mean((R_g - b_g) * grad log pi_g)`` for every group ``g``.

        ``batch`` pairs each trajectory with one reward per group. The
        baseline is read before the step and updated with the rewards after it.
        Groups whose advantages are all zero are left untouched.
        """
        self._check_grouping(grouping)
        lr = self.lr if lr is None else lr
        members = grouping.members()
        if keys is None:
            keys = [FUSED] if grouping.mode == FUSED else [f"stage{g}" for g in range(len(members))]
        base = [baseline.get(k) for k in keys]
        total: list[dict[str, np.ndarray] | None] = [None] * len(members)
        for traj, rewards in batch:
            if len(rewards) != len(members):
                raise ValueError("need one reward per group")
            advantages = [float(r) - b for r, b in zip(rewards, base)]
            if not all(math.isfinite(a) for a in advantages):
                raise ValueError("rewards must be finite")
            if not any(advantages):
                continue
            _, grads = self.log_prob_and_grad(grouping, traj)
            for g, adv in enumerate(advantages):
                if adv == 0.0:
                    continue
                scaled = {k: adv * v for k, v in grads[g].items()}
                if total[g] is None:
                    total[g] = scaled
                else:
                    for k in scaled:
                        total[g][k] += scaled[k]
        for g, grad in enumerate(total):
            if grad is None:
                continue
            grad = {k: v / len(batch) for k, v in grad.items()}
            self._apply(members[g], grad, lr)
        for _, rewards in batch:
            for k, r in zip(keys, rewards):
                baseline.update(k, float(r))

    def _apply(self, members: Sequence[int], grad: dict[str, np.ndarray], lr: float) -> None:
        idx = list(members)
        if self.optimizer == "sgd":
            for k, g in grad.items():
                self.params[k][idx] += lr * g
            return
        b1, b2 = ADAM_BETAS
        self.adam_t[idx] += 1
        t = self.adam_t[idx]
        for k, g in grad.items():
            m = self.adam_m[k][idx] = b1 * self.adam_m[k][idx] + (1 - b1) * g
            v = self.adam_v[k][idx] = b2 * self.adam_v[k][idx] + (1 - b2) * g * g
            shape = (-1,) + (1,) * g.ndim
            mhat = m / (1 - b1 ** t).reshape(shape)
            vhat = v / (1 - b2 ** t).reshape(shape)
            self.params[k][idx] += lr * mhat / (np.sqrt(vhat) + ADAM_EPS)

    # -- snapshots -----------------------------------------------------------------

    def snapshot(self) -> Snapshot:
        arrays = {f"param/{k}": v.copy() for k, v in self.params.items()}
        arrays.update({f"adam_m/{k}": v.copy() for k, v in self.adam_m.items()})
        arrays.update({f"adam_v/{k}": v.copy() for k, v in self.adam_v.items()})
        arrays["adam_t"] = self.adam_t.copy()
        return Snapshot(arrays)

    def restore(self, snap: Snapshot) -> "Controller":
        for k in self.params:
            self.params[k] = snap.arrays[f"param/{k}"].copy()
            self.adam_m[k] = snap.arrays[f"adam_m/{k}"].copy()
            self.adam_v[k] = snap.arrays[f"adam_v/{k}"].copy()
        self.adam_t = snap.arrays["adam_t"].copy()
        return self

    def param_digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()

    def clone(self) -> "Controller":
        return copy.deepcopy(self)


def init_controller(space: SearchSpace, depth: int, hidden: int = 64, seed: int = 0,
                    init_scale: float = 0.1, lr: float = 0.0006, optimizer: str = "adam") -> Controller:
    """Controller with ``depth`` independently initialized cells.

    Weights are uniform in ``[-init_scale, init_scale]``; biases start at zero.
    """
    if hidden < 1:
        raise ValueError("hidden must be >= 1")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    rng = np.random.default_rng(seed)
    decisions = space.decisions()
    n_tokens = 1 + sum(len(c) for _, c in decisions)

    def uniform(*shape):
        return rng.uniform(-init_scale, init_scale, size=shape) if init_scale else np.zeros(shape)

    params = {
        "Wh": uniform(depth, hidden, hidden),
        "emb": uniform(depth, n_tokens, hidden),
        "bh": np.zeros((depth, hidden)),
    }
    for name, choices in decisions:
        params[f"W_{name}"] = uniform(depth, len(choices), hidden)
        params[f"b_{name}"] = np.zeros((depth, len(choices)))
    return Controller(space, depth, hidden, params, lr=lr, optimizer=optimizer)


def space_size(space: SearchSpace, depth: int, partition: Partition | None = None) -> tuple[int, list[int]]:
    """Joint design-space size and the per-stage sizes a stage-wise controller faces."""
    per_layer = space.layer_choices()
    stages = partition.stages() if partition is not None else [range(depth)]
    factored = [per_layer ** len(r) for r in stages]
    return math.prod(factored), factored
