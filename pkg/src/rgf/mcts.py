"""Monte-Carlo tree search over a learned (or scripted) model.

A model exposes four calls, so search never touches the environment or the
metric suite unless the model itself wraps them (see :class:`OracleModel`,
used for testing search mechanics in isolation):

* ``initial_inference(observation) -> (latent, policy_logits, value)``
* ``recurrent_inference(latent, action) -> (latent, reward, policy_logits, value)``
* ``legal_mask(latent) -> bool array``
* ``is_terminal(latent) -> bool``
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np

from . import env as env_mod
from . import nets


class Model(Protocol):
    def initial_inference(self, observation): ...
    def recurrent_inference(self, latent, action: int): ...
    def legal_mask(self, latent) -> np.ndarray: ...
    def is_terminal(self, latent) -> bool: ...


@dataclass(frozen=True)
class SearchConfig:
    n_simulations: int = 50
    c1: float = 1.25
    c2: float = 19652.0
    dirichlet_alpha: float = 0.3
    noise_fraction: float = 0.25
    # (fraction of training completed, temperature) breakpoints
    temperature_schedule: tuple[tuple[float, float], ...] = ((0.0, 1.0), (0.5, 0.5), (0.75, 0.25))
    max_depth: int | None = None

    def __post_init__(self):
        if self.n_simulations < 1:
            raise ValueError("n_simulations must be >= 1")
        if not 0.0 <= self.noise_fraction <= 1.0:
            raise ValueError("noise_fraction must lie in [0, 1]")

    def temperature(self, progress: float) -> float:
        temp = self.temperature_schedule[0][1]
        for start, value in self.temperature_schedule:
            if progress >= start:
                temp = value
        return temp


class MinMaxStats:
    """Running bounds of backed-up values; the range is floored at
    ``min_range`` so numerically equal values are not stretched to [0, 1]."""

    def __init__(self, min_range: float = 0.01):
        self.lo = math.inf
        self.hi = -math.inf
        self.min_range = min_range

    def update(self, value: float) -> None:
        self.lo = min(self.lo, value)
        self.hi = max(self.hi, value)

    def normalize(self, value):
        if self.hi > self.lo:
            return (value - self.lo) / max(self.hi - self.lo, self.min_range)
        return value


class SearchNode:
    """Tree node. Statistics of a child live in its parent's arrays (one
    entry per legal action), so selection is a vectorized argmax; the node
    attributes read and write those entries."""

    __slots__ = ("parent", "slot", "_own", "latent", "expanded", "terminal", "actions",
                 "child_prior", "child_visits", "child_value_sum", "child_reward", "_kids")

    def __init__(self, prior: float = 1.0, parent: "SearchNode | None" = None, slot: int = -1):
        self.parent = parent
        self.slot = slot
        self._own = [float(prior), 0, 0.0, 0.0]  # used only without a parent
        self.latent = None
        self.expanded = False
        self.terminal = False
        self.actions = np.zeros(0, dtype=np.int64)
        self._kids: list = []

    def _get(self, k: int, arr: str):
        if self.parent is None:
            return self._own[k]
        return getattr(self.parent, arr)[self.slot].item()

    def _set(self, k: int, arr: str, value) -> None:
        if self.parent is None:
            self._own[k] = value
        else:
            getattr(self.parent, arr)[self.slot] = value

    prior = property(lambda s: s._get(0, "child_prior"), lambda s, v: s._set(0, "child_prior", v))
    visit_count = property(lambda s: s._get(1, "child_visits"), lambda s, v: s._set(1, "child_visits", v))
    value_sum = property(lambda s: s._get(2, "child_value_sum"), lambda s, v: s._set(2, "child_value_sum", v))
    reward = property(lambda s: s._get(3, "child_reward"), lambda s, v: s._set(3, "child_reward", v))

    @property
    def q(self) -> float:
        n = self.visit_count
        return self.value_sum / n if n else 0.0

    def child(self, action: int) -> "SearchNode":
        i = int(np.searchsorted(self.actions, action))
        if i >= len(self.actions) or self.actions[i] != action:
            raise KeyError(action)
        return self.child_at(i)

    def child_at(self, i: int) -> "SearchNode":
        """Child in slot ``i`` of ``actions``."""
        if self._kids[i] is None:
            self._kids[i] = SearchNode(parent=self, slot=i)
        return self._kids[i]

    @property
    def children(self) -> dict[int, "SearchNode"]:
        return {int(a): self.child(int(a)) for a in self.actions}

    def __repr__(self):
        return f"SearchNode(N={self.visit_count}, Q={self.q:.4f}, children={len(self.actions)})"


@dataclass
class SearchResult:
    visit_distribution: np.ndarray
    root_value: float
    best_action: int
    root: SearchNode

    def trace(self) -> dict:
        return search_trace(self.root)


def _masked_priors(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    z = np.where(mask, logits, -np.inf)
    z = z - z[mask].max()
    p = np.where(mask, np.exp(z), 0.0)
    return p / p.sum()


def expand(node: SearchNode, latent, logits, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    node.latent = latent
    node.expanded = True
    node.actions = np.flatnonzero(mask)
    k = len(node.actions)
    node.child_prior = _masked_priors(logits, mask)[node.actions]
    node.child_visits = np.zeros(k, dtype=np.int64)
    node.child_value_sum = np.zeros(k)
    node.child_reward = np.zeros(k)
    node._kids = [None] * k


def ucb_scores(node: SearchNode, config: SearchConfig, stats: MinMaxStats | None = None) -> np.ndarray:
    """Upper confidence bound of every legal child, in ``node.actions`` order."""
    n = node.visit_count
    visits = node.child_visits
    c = (math.log((n + config.c2 + 1.0) / config.c2) + config.c1) * math.sqrt(n)
    q = node.child_reward + node.child_value_sum / np.maximum(visits, 1)
    if stats is not None:
        q = stats.normalize(q)
    q[visits == 0] = 0.0
    return q + node.child_prior * c / (1.0 + visits)


def select_child(node: SearchNode, config: SearchConfig, stats: MinMaxStats | None = None) -> int:
    """Action maximizing the upper confidence bound; ties go to the lowest index."""
    if len(node.actions) == 0:
        raise ValueError("node has no children")
    return int(node.actions[int(np.argmax(ucb_scores(node, config, stats)))])


def backup(path: Sequence[SearchNode], leaf_value: float, stats: MinMaxStats | None = None) -> None:
    """Undiscounted backup: node k receives the rewards below it plus ``leaf_value``."""
    g = float(leaf_value)
    for node in reversed(path):
        parent = node.parent
        if parent is None:
            node.value_sum = node.value_sum + g
            node.visit_count = node.visit_count + 1
            r = node.reward
            q = node.q
        else:  # same update, straight on the parent's arrays
            i = node.slot
            parent.child_value_sum[i] += g
            parent.child_visits[i] += 1
            r = float(parent.child_reward[i])
            q = float(parent.child_value_sum[i]) / int(parent.child_visits[i])
        if stats is not None:
            stats.update(r + q)
        g = r + g


def add_exploration_noise(root: SearchNode, config: SearchConfig, rng: np.random.Generator) -> SearchNode:
    f = config.noise_fraction
    if f == 0.0 or len(root.actions) == 0:
        return root
    noise = rng.dirichlet([config.dirichlet_alpha] * len(root.actions))
    root.child_prior = (1.0 - f) * root.child_prior + f * noise
    return root


def sample_action(visit_distribution, temperature: float, rng: np.random.Generator) -> int:
    v = np.asarray(visit_distribution, dtype=np.float64)
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if temperature == 0.0:
        return int(np.argmax(v))
    with np.errstate(divide="ignore"):
        logv = np.where(v > 0, np.log(np.where(v > 0, v, 1.0)), -np.inf) / temperature
    p = np.exp(logv - logv.max())
    p /= p.sum()
    return int(rng.choice(len(v), p=p))


def run_search(root_observation, model, legal_mask=None, config: SearchConfig = SearchConfig(),
               rng: np.random.Generator | None = None, add_noise: bool = True) -> SearchResult:
    """Run ``config.n_simulations`` simulations from ``root_observation``.

    ``model`` may be a :class:`rgf.nets.ModelParams` (wrapped in a
    :class:`NetModel`) or any object following the model protocol.
    """
    if isinstance(model, nets.ModelParams):
        model = NetModel(model)
    rng = np.random.default_rng(0) if rng is None else rng
    latent, logits, value = model.initial_inference(root_observation)
    mask = np.asarray(model.legal_mask(latent) if legal_mask is None else legal_mask, dtype=bool)
    if not mask.any():
        raise ValueError("no legal action at the root")
    root = SearchNode(prior=1.0)
    expand(root, latent, logits, mask)
    stats = MinMaxStats()
    backup([root], value, None)
    if add_noise:
        add_exploration_noise(root, config, rng)

    for _ in range(config.n_simulations):
        node, path = root, [root]
        while node.expanded and not node.terminal:
            if config.max_depth is not None and len(path) > config.max_depth:
                break
            i = int(np.argmax(ucb_scores(node, config, stats)))
            action = int(node.actions[i])
            node = node.child_at(i)
            path.append(node)
        if node.terminal or node.expanded:
            leaf_value = 0.0 if node.terminal else node.q
        else:
            parent = path[-2]
            latent, reward, logits, value = model.recurrent_inference(parent.latent, action)
            node.reward = float(reward)
            if model.is_terminal(latent):
                node.latent, node.terminal = latent, True
                leaf_value = 0.0
            else:
                child_mask = np.asarray(model.legal_mask(latent), dtype=bool)
                expand(node, latent, logits, child_mask)
                leaf_value = float(value)
        backup(path, leaf_value, stats)

    visits = np.zeros(len(mask))
    visits[root.actions] = root.child_visits
    dist = visits / visits.sum()
    return SearchResult(dist, root.q, int(np.argmax(visits)), root)


def search_trace(root: SearchNode) -> dict:
    return {
        "visits": root.visit_count,
        "value": root.q,
        "children": [
            {"action": a, "prior": c.prior, "N": c.visit_count, "Q": c.q, "reward": c.reward}
            for a, c in sorted(root.children.items())
        ],
    }


def dump_trace(path, result: SearchResult) -> None:
    with open(path, "w") as fh:
        json.dump(result.trace(), fh, indent=1)


# --------------------------------------------------------------------------
# models
# --------------------------------------------------------------------------


class NetModel:
    """Search model backed by the learned functions of :mod:`rgf.nets`.

    Keypoint features are computed once per (image, keypoints) pair.
    """

    def __init__(self, params: nets.ModelParams):
        self.params = params
        self._key = None
        self._features = None

    def features(self, observation) -> nets.KeypointFeatures:
        key = (id(observation.image), id(observation.keypoints))
        if key != self._key:
            self._features = nets.extract_keypoint_features(observation.image, observation.keypoints, self.params)
            self._key = key
            self._refs = (observation.image, observation.keypoints)  # pin ids
        return self._features

    def initial_inference(self, observation):
        latent = nets.represent(observation, self.params, self.features(observation))
        if latent.terminal:
            return latent, np.zeros(latent.n_actions), 0.0
        logits, vdist = nets.predict(latent, self.params)
        return latent, logits, nets.decode_scalar(vdist, self.params)

    def recurrent_inference(self, latent, action: int):
        nxt, rdist = nets.dynamics(latent, action, self.params)
        reward = nets.decode_scalar(rdist, self.params)
        if nxt.terminal:
            return nxt, reward, np.zeros(nxt.n_actions), 0.0
        logits, vdist = nets.predict(nxt, self.params)
        return nxt, reward, logits, nets.decode_scalar(vdist, self.params)

    def legal_mask(self, latent) -> np.ndarray:
        return latent.legal_mask()

    def is_terminal(self, latent) -> bool:
        return latent.terminal


class OracleModel:
    """Uses the real environment as the model: uniform priors, zero values,
    true rewards. Only meant for validating search mechanics.

    Scores are memoized per edge set, so one instance should serve a single
    scene (ground truth, keypoints and metric config).
    """

    def __init__(self):
        self.cache: dict = {}

    def initial_inference(self, observation: env_mod.EnvState):
        if observation.score_cache is None:
            observation = replace(observation, score_cache=self.cache)
        return observation, np.zeros(observation.n_actions), 0.0

    def recurrent_inference(self, latent: env_mod.EnvState, action: int):
        nxt, reward, _ = env_mod.step(latent, action)
        return nxt, reward, np.zeros(nxt.n_actions), 0.0

    def legal_mask(self, latent: env_mod.EnvState) -> np.ndarray:
        return env_mod.legal_actions(latent)

    def is_terminal(self, latent: env_mod.EnvState) -> bool:
        return latent.done
