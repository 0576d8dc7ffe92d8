"""Edge-sequence environment: each pair of actions picks the two endpoints of
a new edge among fixed keypoints; a final end-of-sequence token stops.

States are immutable; :func:`step` returns a fresh state. Rewards are the
change in combined score against the ground truth on every completed edge,
so the undiscounted return telescopes to ``final score - initial score``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .graph import SpatialGraph
from .metrics import MetricConfig, combined_score


class IllegalActionError(ValueError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    n_max: int | None = None  # max edges; default 4 * |keypoints| capped at 256
    n_max_cap: int = 256
    metric: MetricConfig = field(default_factory=MetricConfig)

    def resolve_n_max(self, n_keypoints: int) -> int:
        if self.n_max is not None:
            return int(self.n_max)
        return max(1, min(4 * n_keypoints, self.n_max_cap))


@dataclass(frozen=True, eq=False)
class EnvState:
    image: np.ndarray
    keypoints: np.ndarray
    edge_tokens: tuple[int, ...]
    t: int
    done: bool
    cached_score: float
    gt: SpatialGraph | None
    n_max: int
    edges: frozenset = frozenset()
    metric: MetricConfig = field(default_factory=MetricConfig)
    score_cache: dict | None = None  # optional memo: edge set -> score, shared along a lineage

    @property
    def n_keypoints(self) -> int:
        return len(self.keypoints)

    @property
    def n_actions(self) -> int:
        return self.n_keypoints + 1

    @property
    def eos(self) -> int:
        return self.n_keypoints

    @property
    def t_max(self) -> int:
        return 2 * self.n_max + 1

    @property
    def pending(self) -> int | None:
        return self.edge_tokens[-1] if self.t % 2 == 1 else None

    def pred_graph(self) -> SpatialGraph:
        return pred_graph(self.image.shape[1], self.image.shape[0], self.keypoints, self.edges)


def pred_graph(width: int, height: int, keypoints: np.ndarray, edges: Iterable[tuple[int, int]]) -> SpatialGraph:
    e = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
    return SpatialGraph(width, height, keypoints, e)


def _score(gt: SpatialGraph | None, width: int, height: int, keypoints, edges, metric: MetricConfig) -> float:
    if gt is None:
        return 0.0
    return combined_score(gt, pred_graph(width, height, keypoints, edges), metric)


def reset(image: np.ndarray, keypoints, initial_edges: Sequence[tuple[int, int]] = (),
          gt: SpatialGraph | None = None, config: EnvConfig = EnvConfig()) -> EnvState:
    image = np.asarray(image)
    if image.ndim == 3:
        image = luma(image)
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    if len(kp) == 0:
        raise ValueError("keypoints must be nonempty")
    kp.setflags(write=False)
    n = len(kp)
    tokens: list[int] = []
    edges: set[tuple[int, int]] = set()
    for k, (a, b) in enumerate(initial_edges):
        a, b = int(a), int(b)
        if not (0 <= a < n and 0 <= b < n) or a == b:
            raise ValueError(f"initial edge {k} ({a}, {b}) is not a valid keypoint pair")
        tokens += [a, b]
        edges.add((min(a, b), max(a, b)))
    n_max = config.resolve_n_max(n)
    if len(initial_edges) >= n_max:
        raise ValueError(f"{len(initial_edges)} initial edges exceed the edge budget {n_max}")
    h, w = image.shape[:2]
    score = _score(gt, w, h, kp, edges, config.metric)
    return EnvState(image, kp, tuple(tokens), len(tokens), False, score, gt, n_max, frozenset(edges), config.metric)


def luma(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.round(y), 0, 255).astype(np.uint8)


def legal_mask_for(n_keypoints: int, t: int, pending: int | None, t_max: int) -> np.ndarray:
    mask = np.ones(n_keypoints + 1, dtype=bool)
    if t % 2 == 1:
        mask[n_keypoints] = False
        if pending is not None:
            mask[pending] = False
    elif t >= t_max - 1:
        mask[:n_keypoints] = False
    return mask


def legal_actions(state: EnvState) -> np.ndarray:
    if state.done:
        raise IllegalActionError("episode is over; no actions are legal")
    return legal_mask_for(state.n_keypoints, state.t, state.pending, state.t_max)


def step(state: EnvState, action: int) -> tuple[EnvState, float, bool]:
    if state.done:
        raise IllegalActionError("episode is over")
    action = int(action)
    if not 0 <= action < state.n_actions:
        raise IllegalActionError(f"action {action} outside [0, {state.n_actions})")
    if not legal_actions(state)[action]:
        if action == state.eos:
            why = "end-of-sequence is only legal between edges"
        elif action == state.pending:
            why = "an edge cannot join a keypoint to itself"
        else:
            why = "the step budget only allows end-of-sequence"
        raise IllegalActionError(f"action {action} is illegal at t={state.t}: {why}")
    tokens = state.edge_tokens + (action,)
    t = state.t + 1
    if action == state.eos:
        return replace(state, edge_tokens=tokens, t=t, done=True), 0.0, True
    if t % 2 == 1:
        return replace(state, edge_tokens=tokens, t=t), 0.0, False
    a = state.edge_tokens[-1]
    key = (min(a, action), max(a, action))
    if key in state.edges:
        return replace(state, edge_tokens=tokens, t=t), 0.0, False
    edges = state.edges | {key}
    h, w = state.image.shape[:2]
    cache = state.score_cache
    if cache is not None and edges in cache:
        score = cache[edges]
    else:
        score = _score(state.gt, w, h, state.keypoints, edges, state.metric)
        if cache is not None:
            cache[edges] = score
    reward = score - state.cached_score if state.gt is not None else 0.0
    new = replace(state, edge_tokens=tokens, t=t, edges=edges, cached_score=score)
    return new, reward, False


@dataclass(frozen=True)
class Transition:
    t: int
    action: int
    reward: float
    done: bool


def rollout(state: EnvState, actions: Iterable[int]) -> tuple[EnvState, list[Transition]]:
    trace = []
    for a in actions:
        t = state.t
        state, r, done = step(state, a)
        trace.append(Transition(t, int(a), r, done))
        if done:
            break
    return state, trace


def episode_return(trace: Sequence) -> float:
    """Undiscounted sum of rewards; accepts Transitions or (state, reward, done) tuples."""
    total = 0.0
    for item in trace:
        total += item.reward if isinstance(item, Transition) else item[1]
    return total


def write_trace(path: str | os.PathLike, trace: Sequence[Transition], scene: str | dict) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"scene": scene}) + "\n")
        for tr in trace:
            fh.write(json.dumps({"t": tr.t, "action": tr.action, "reward": tr.reward, "done": tr.done}) + "\n")


def read_trace(path: str | os.PathLike) -> tuple[dict, list[Transition]]:
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    return lines[0], [Transition(d["t"], d["action"], d["reward"], d["done"]) for d in lines[1:]]
