"""Self-play, prioritized replay with reanalysis, n-step targets and updates.

One learner applies updates; self-play producers read versioned parameter
snapshots and push finished episodes into the replay buffer, which is the
only shared mutable object (guarded by a lock).
"""

from __future__ import annotations

import csv
import json
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import env as env_mod
from . import mcts, nets
from .graph import SpatialGraph
from .metrics import MetricConfig, combined_score

PRIORITY_EPS = 1e-3


# --------------------------------------------------------------------------
# scenes and episodes
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrainScene:
    image: np.ndarray
    keypoints: np.ndarray
    gt: SpatialGraph
    demo_edges: tuple[tuple[int, int], ...] | None = None  # gt expressed over keypoint indices
    surrogate: SpatialGraph | None = None  # optional reward target for the curriculum phase
    name: str = ""


@dataclass(frozen=True)
class Observation:
    """The minimum the learned model needs: no ground truth, no metric."""
    image: np.ndarray
    keypoints: np.ndarray
    edge_tokens: tuple[int, ...]
    t_max: int


@dataclass
class Episode:
    scene_index: int
    initial_tokens: tuple[int, ...]
    t_max: int
    actions: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    visit_dists: list[np.ndarray] = field(default_factory=list)
    root_values: list[float] = field(default_factory=list)
    policy_valid: list[bool] = field(default_factory=list)
    priorities: np.ndarray | None = None
    initial_score: float = 0.0
    final_score: float = 0.0

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def total_return(self) -> float:
        return float(sum(self.rewards))

    def tokens_at(self, t: int) -> tuple[int, ...]:
        return self.initial_tokens + tuple(self.actions[:t])


@dataclass
class TrainTarget:
    t: int
    actions: list[int]
    policy_targets: np.ndarray  # (len(actions) + 1, n_actions)
    policy_mask: np.ndarray
    value_targets: np.ndarray  # (len(actions) + 1,)
    value_mask: np.ndarray
    reward_targets: np.ndarray  # (len(actions),)
    reward_mask: np.ndarray


def value_targets(episode: Episode, td_steps: int = 5) -> np.ndarray:
    """n-step returns with bootstrap from stored root values (0 past the end)."""
    L = len(episode)
    r = np.asarray(episode.rewards, dtype=np.float64)
    v = np.asarray(episode.root_values, dtype=np.float64)
    z = np.zeros(L)
    for t in range(L):
        n = min(td_steps, L - t)
        boot = v[t + n] if t + n < L else 0.0
        z[t] = r[t : t + n].sum() + boot
    return z


def episode_priorities(episode: Episode, td_steps: int = 5) -> np.ndarray:
    z = value_targets(episode, td_steps)
    return np.abs(np.asarray(episode.root_values, dtype=np.float64) - z) + PRIORITY_EPS


def make_target(episode: Episode, t: int, z: np.ndarray, unroll_steps: int, n_actions: int) -> TrainTarget:
    L = len(episode)
    K = min(unroll_steps, L - t)
    acts = list(episode.actions[t : t + K])
    pol = np.zeros((K + 1, n_actions))
    pmask = np.zeros(K + 1, dtype=bool)
    vt = np.zeros(K + 1)
    vmask = np.ones(K + 1, dtype=bool)
    for k in range(K + 1):
        i = t + k
        if i < L:
            pol[k] = episode.visit_dists[i]
            pmask[k] = episode.policy_valid[i]
            vt[k] = z[i]
    rt = np.asarray(episode.rewards[t : t + K], dtype=np.float64)
    return TrainTarget(t, acts, pol, pmask, vt, vmask, rt, np.ones(K, dtype=bool))


def compute_targets(episode: Episode, td_steps: int = 5, unroll_steps: int = 5) -> list[TrainTarget]:
    n_actions = len(episode.visit_dists[0]) if episode.visit_dists else 0
    z = value_targets(episode, td_steps)
    return [make_target(episode, t, z, unroll_steps, n_actions) for t in range(len(episode))]


# --------------------------------------------------------------------------
# replay
# --------------------------------------------------------------------------


@dataclass
class SampledBatch:
    samples: list[nets.TrainSample]
    keys: list[tuple[int, int]]  # (episode id, step)
    weights: np.ndarray


class ReplayBuffer:
    """FIFO buffer of whole episodes with per-step priorities."""

    def __init__(self, scenes: Sequence[TrainScene], capacity: int = 512, td_steps: int = 5,
                 unroll_steps: int = 5, beta: float = 1.0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.scenes = list(scenes)
        self.capacity = capacity
        self.td_steps = td_steps
        self.unroll_steps = unroll_steps
        self.beta = beta
        self._episodes: dict[int, Episode] = {}
        self._next_id = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._episodes)

    @property
    def n_steps(self) -> int:
        with self._lock:
            return sum(len(e) for e in self._episodes.values())

    def episode_ids(self) -> list[int]:
        with self._lock:
            return sorted(self._episodes)

    def episode(self, eid: int) -> Episode:
        with self._lock:
            return self._episodes[eid]

    def add(self, episode: Episode) -> int:
        if len(episode) == 0:
            raise ValueError("cannot store an empty episode")
        episode.priorities = episode_priorities(episode, self.td_steps)
        with self._lock:
            eid = self._next_id
            self._next_id += 1
            self._episodes[eid] = episode
            while len(self._episodes) > self.capacity:
                del self._episodes[min(self._episodes)]
            return eid

    def refresh_priorities(self, eid: int) -> None:
        with self._lock:
            ep = self._episodes.get(eid)
            if ep is not None:
                ep.priorities = episode_priorities(ep, self.td_steps)

    def _flat(self):
        ids, steps, pri = [], [], []
        for eid in sorted(self._episodes):
            ep = self._episodes[eid]
            ids.append(np.full(len(ep), eid))
            steps.append(np.arange(len(ep)))
            pri.append(ep.priorities)
        return np.concatenate(ids), np.concatenate(steps), np.concatenate(pri)

    def sample_keys(self, batch_size: int, rng: np.random.Generator):
        with self._lock:
            if not self._episodes:
                raise ValueError("replay buffer is empty")
            ids, steps, pri = self._flat()
        probs = pri / pri.sum()
        idx = rng.choice(len(pri), size=batch_size, p=probs)
        w = (1.0 / (len(pri) * probs[idx])) ** self.beta
        w = w / w.max()
        return [(int(ids[i]), int(steps[i])) for i in idx], w

    def make_sample(self, eid: int, t: int, weight: float = 1.0) -> nets.TrainSample:
        with self._lock:
            ep = self._episodes[eid]
        scene = self.scenes[ep.scene_index]
        n_actions = len(scene.keypoints) + 1
        z = value_targets(ep, self.td_steps)
        tg = make_target(ep, t, z, self.unroll_steps, n_actions)
        return nets.TrainSample(scene.image, scene.keypoints, ep.tokens_at(t), ep.t_max, tg.actions,
                                tg.policy_targets, tg.policy_mask, tg.value_targets, tg.value_mask,
                                tg.reward_targets, tg.reward_mask, float(weight))


def sample_batch(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> SampledBatch:
    keys, w = buffer.sample_keys(batch_size, rng)
    return SampledBatch([buffer.make_sample(e, t, wi) for (e, t), wi in zip(keys, w)], keys, w)


# --------------------------------------------------------------------------
# acting
# --------------------------------------------------------------------------


class ParameterStore:
    """Single-writer, many-reader parameter snapshots tagged by version."""

    def __init__(self, params: nets.ModelParams):
        self._lock = threading.Lock()
        self._params = params

    def publish(self, params: nets.ModelParams) -> None:
        with self._lock:
            self._params = params

    def snapshot(self) -> nets.ModelParams:
        with self._lock:
            return self._params

    @property
    def version(self) -> int:
        return self.snapshot().version


def n_workers() -> int:
    try:
        return max(1, int(os.environ.get("RGF_THREADS", "1")))
    except ValueError:
        return 1


def reset_scene(scene: TrainScene, env_config: env_mod.EnvConfig = env_mod.EnvConfig(),
                initial_edges=(), use_surrogate: bool = False) -> env_mod.EnvState:
    gt = scene.surrogate if use_surrogate and scene.surrogate is not None else scene.gt
    return env_mod.reset(scene.image, scene.keypoints, initial_edges, gt, env_config)


def observation_of(state) -> Observation:
    return Observation(state.image, state.keypoints, tuple(state.edge_tokens), state.t_max)


def play_episode(scene: TrainScene, scene_index: int, params: nets.ModelParams, search_config: mcts.SearchConfig,
                 rng: np.random.Generator, temperature: float = 1.0, add_noise: bool = True,
                 env_config: env_mod.EnvConfig = env_mod.EnvConfig(), use_surrogate: bool = False,
                 initial_edges=(), model=None) -> Episode:
    """One episode with search at every step. A custom search ``model``
    (e.g. :class:`rgf.mcts.OracleModel`) receives the full env state."""
    state = reset_scene(scene, env_config, initial_edges, use_surrogate)
    learned = model is None
    model = mcts.NetModel(params) if learned else model
    ep = Episode(scene_index, tuple(state.edge_tokens), state.t_max, initial_score=state.cached_score)
    while not state.done:
        obs = observation_of(state) if learned else state
        res = mcts.run_search(obs, model, None, search_config, rng, add_noise)
        a = mcts.sample_action(res.visit_distribution, temperature, rng)
        state, r, _ = env_mod.step(state, a)
        ep.actions.append(a)
        ep.rewards.append(r)
        ep.visit_dists.append(res.visit_distribution)
        ep.root_values.append(res.root_value)
        ep.policy_valid.append(True)
    ep.final_score = state.cached_score
    return ep


def self_play(scenes: Sequence[TrainScene], params: nets.ModelParams, search_config: mcts.SearchConfig,
              n_episodes: int, rng: np.random.Generator, temperature: float = 1.0,
              env_config: env_mod.EnvConfig = env_mod.EnvConfig(), use_surrogate: bool = False,
              workers: int | None = None) -> list[Episode]:
    """Play ``n_episodes`` on scenes drawn from ``rng``.

    Each episode gets its own child generator, so results do not depend on
    the number of worker threads.
    """
    picks = rng.integers(0, len(scenes), size=n_episodes)
    seeds = rng.integers(0, 2**63 - 1, size=n_episodes)

    def job(k):
        i = int(picks[k])
        return play_episode(scenes[i], i, params, search_config, np.random.default_rng(int(seeds[k])),
                            temperature, True, env_config, use_surrogate)

    workers = n_workers() if workers is None else workers
    if workers <= 1 or n_episodes <= 1:
        return [job(k) for k in range(n_episodes)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, range(n_episodes)))


def demo_episode(scene: TrainScene, scene_index: int, rng: np.random.Generator, noise: float = 0.0,
                 env_config: env_mod.EnvConfig = env_mod.EnvConfig(), random_order: float = 0.0) -> Episode:
    """Scripted episode emitting the gt edges, for supervised pretraining.

    Edges are drawn as strokes: the next edge starts where the last one ended
    when possible. The policy target at every step is uniform over all moves
    consistent with completing the gt (not just the scripted one). With
    probability ``noise`` a completing step picks a random wrong endpoint
    instead, so the reward model also sees negative examples. With
    probability ``random_order`` (drawn once per episode) the edges come in a
    uniformly random consistent order instead of strokes, which covers the
    partial graphs a learned policy reaches by itself.
    """
    if scene.demo_edges is None:
        raise ValueError("scene has no demo edges")
    state = reset_scene(scene, env_config)
    n = len(scene.keypoints)
    gt_edges = {(min(a, b), max(a, b)) for a, b in scene.demo_edges}
    adj: dict[int, set[int]] = {}
    for a, b in gt_edges:
        adj.setdefault(a, set()).add(b)
        adj.setdefault(b, set()).add(a)
    ep = Episode(scene_index, tuple(state.edge_tokens), state.t_max, initial_score=state.cached_score)
    last = None
    shuffled = random_order > 0 and rng.random() < random_order
    budget = state.t_max - 1
    while not state.done:
        missing = gt_edges - state.edges
        pi = np.zeros(n + 1)
        if state.t % 2 == 0:
            if not missing or state.t >= budget:
                a = n
                pi[n] = 1.0
            else:
                starts = sorted({v for e in missing for v in e})
                pi[starts] = 1.0
                cont = [b for b in sorted(adj.get(last, ())) if (min(last, b), max(last, b)) in missing] if last is not None else []
                if shuffled:
                    a = int(rng.choice(starts))
                else:
                    a = last if cont else min(starts)
        else:
            p = state.pending
            good = sorted(b for b in adj.get(p, ()) if (min(p, b), max(p, b)) in missing)
            if not good:
                good = sorted(adj.get(p, ())) or [b for b in range(n) if b != p][:1]
            pi[good] = 1.0
            a = int(rng.choice(good)) if shuffled else good[0]
            if noise > 0 and rng.random() < noise:
                bad = [b for b in range(n) if b != p and b not in adj.get(p, ())]
                if bad:
                    a = int(rng.choice(bad))
        pi /= pi.sum()
        state, r, _ = env_mod.step(state, a)
        last = a if state.t % 2 == 0 else last
        ep.actions.append(int(a))
        ep.rewards.append(r)
        ep.visit_dists.append(pi)
        ep.policy_valid.append(True)
    # Monte-Carlo returns stand in for search values
    togo = np.cumsum(np.asarray(ep.rewards)[::-1])[::-1]
    ep.root_values = [float(v) for v in togo]
    ep.final_score = state.cached_score
    return ep


# --------------------------------------------------------------------------
# reanalysis and updates
# --------------------------------------------------------------------------


def reanalyze(buffer: ReplayBuffer, fresh_params: nets.ModelParams, fraction: float, rng: np.random.Generator,
              search_config: mcts.SearchConfig = mcts.SearchConfig()) -> ReplayBuffer:
    """Refresh visit distributions and root values of a random share of steps."""
    if fraction <= 0:
        return buffer
    with buffer._lock:
        ids, steps, _ = buffer._flat()
    k = int(round(fraction * len(ids)))
    if k == 0:
        return buffer
    pick = np.sort(rng.choice(len(ids), size=k, replace=False))
    seeds = rng.integers(0, 2**63 - 1, size=k)
    model = mcts.NetModel(fresh_params)
    touched = set()
    for j, i in enumerate(pick):
        eid, t = int(ids[i]), int(steps[i])
        try:
            ep = buffer.episode(eid)
        except KeyError:
            continue
        scene = buffer.scenes[ep.scene_index]
        obs = Observation(scene.image, scene.keypoints, ep.tokens_at(t), ep.t_max)
        res = mcts.run_search(obs, model, None, search_config, np.random.default_rng(int(seeds[j])), add_noise=False)
        with buffer._lock:
            if ep.policy_valid[t]:
                ep.visit_dists[t] = res.visit_distribution
            ep.root_values[t] = res.root_value
        touched.add(eid)
    for eid in touched:
        buffer.refresh_priorities(eid)
    return buffer


class Momentum:
    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: nets.ModelParams, grads: dict, lr: float) -> nets.ModelParams:
        new = {}
        for k, p in params.arrays.items():
            v = self.velocity.get(k)
            v = grads[k] if v is None else self.momentum * v + grads[k]
            self.velocity[k] = v
            new[k] = (p - lr * v).astype(p.dtype) if lr else p
        return nets.ModelParams(params.config, new, params.version + 1)


def clip_gradients(grads: dict, max_norm: float | None) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


def update(params: nets.ModelParams, batch, learning_rate: float, optimizer: Momentum | None = None,
           loss_spec: nets.LossSpec = nets.LossSpec(), grad_clip: float | None = None):
    """One gradient step on the importance-weighted unrolled loss."""
    samples = batch.samples if isinstance(batch, SampledBatch) else list(batch)
    report, grads = nets.loss_and_grads(params, samples, loss_spec)
    clip_gradients(grads, grad_clip)
    optimizer = Momentum() if optimizer is None else optimizer
    new = optimizer.step(params, grads, learning_rate)
    if not new.is_finite():
        raise FloatingPointError("parameters became non-finite after the update")
    return new, report


def cosine_lr(base: float, step: int, total: int, floor: float = 0.0) -> float:
    if total <= 1:
        return base
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * min(step, total) / total))


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def run_greedy_episode(scene: TrainScene, params: nets.ModelParams, n_simulations: int,
                       env_config: env_mod.EnvConfig = env_mod.EnvConfig(), seed: int = 0,
                       initial_edges=(), search_config: mcts.SearchConfig | None = None):
    """Episode with T=0 and no root noise; returns the final env state and trace."""
    cfg = replace(search_config or mcts.SearchConfig(), n_simulations=n_simulations)
    state = reset_scene(scene, env_config, initial_edges)
    model = mcts.NetModel(params)
    rng = np.random.default_rng(seed)
    trace = []
    while not state.done:
        res = mcts.run_search(observation_of(state), model, None, cfg, rng, add_noise=False)
        t = state.t
        state, r, done = env_mod.step(state, res.best_action)
        trace.append(env_mod.Transition(t, res.best_action, r, done))
    return state, trace


def evaluate_agent(params: nets.ModelParams, scenes: Sequence[TrainScene], n_simulations: int = 50,
                   env_config: env_mod.EnvConfig = env_mod.EnvConfig(), seed: int = 0) -> np.ndarray:
    """Final combined score per scene under greedy search."""
    out = []
    for scene in scenes:
        state, _ = run_greedy_episode(scene, params, n_simulations, env_config, seed)
        out.append(state.cached_score)
    return np.asarray(out)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    seed: int = 0
    n_updates: int = 2000
    pretrain_steps: int = 0  # leading updates drawn from scripted gt episodes
    demo_noise: float = 0.1
    demo_random_order: float = 0.0
    batch_size: int = 16
    unroll_steps: int = 5
    td_steps: int = 5
    learning_rate: float = 1e-3
    lr_floor: float = 0.0
    momentum: float = 0.9
    grad_clip: float | None = None
    buffer_capacity: int = 512
    priority_beta: float = 1.0
    selfplay_interval: int = 4  # one self-play episode every this many RL updates
    selfplay_simulations: int = 50
    reanalyze_interval: int = 0
    reanalyze_fraction: float = 0.0
    curriculum_updates: int = 0  # self-play rewards use the surrogate graph before this update
    eval_interval: int = 0
    eval_simulations: int = 50
    n_max: int | None = None
    net: dict = field(default_factory=dict)  # NetConfig overrides
    search: dict = field(default_factory=dict)  # SearchConfig overrides

    @classmethod
    def from_json(cls, path_or_dict) -> "TrainConfig":
        if isinstance(path_or_dict, dict):
            d = path_or_dict
        else:
            with open(path_or_dict) as fh:
                d = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def net_config(self) -> nets.NetConfig:
        return nets.NetConfig(**self.net)

    def search_config(self) -> mcts.SearchConfig:
        d = dict(self.search)
        if "temperature_schedule" in d:
            d["temperature_schedule"] = tuple(tuple(x) for x in d["temperature_schedule"])
        return mcts.SearchConfig(**d)

    def env_config(self) -> env_mod.EnvConfig:
        return env_mod.EnvConfig(n_max=self.n_max)


METRIC_FIELDS = ["step", "policy_loss", "value_loss", "reward_loss", "eval_return"]


@dataclass
class TrainResult:
    params: nets.ModelParams
    log: list[dict]
    buffer: ReplayBuffer


def train(config: TrainConfig, scenes: Sequence[TrainScene], eval_scenes: Sequence[TrainScene] = (),
          params: nets.ModelParams | None = None, metrics_path: str | os.PathLike | None = None,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Run ``config.n_updates`` updates; the first ``pretrain_steps`` are supervised."""
    init_rng, play_rng, sample_rng, demo_rng, re_rng = (np.random.default_rng(s) for s in
                                                        np.random.SeedSequence(config.seed).spawn(5))
    if params is None:
        params = nets.init_params(config.net_config(), seed=int(init_rng.integers(2**31)))
    store = ParameterStore(params)
    search_cfg = replace(config.search_config(), n_simulations=config.selfplay_simulations)
    env_cfg = config.env_config()
    opt = Momentum(config.momentum)
    buffer = ReplayBuffer(scenes, config.buffer_capacity, config.td_steps, config.unroll_steps, config.priority_beta)
    demo_buffer = ReplayBuffer(scenes, config.buffer_capacity, config.td_steps, config.unroll_steps, config.priority_beta)
    log: list[dict] = []
    fh = writer = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
    demo_scenes = [i for i, s in enumerate(scenes) if s.demo_edges is not None]
    rl_steps = config.n_updates - config.pretrain_steps
    try:
        for step in range(config.n_updates):
            lr = cosine_lr(config.learning_rate, step, config.n_updates, config.lr_floor)
            if step < config.pretrain_steps:
                if not demo_scenes:
                    raise ValueError("pretraining needs scenes with demo edges")
                while len(demo_buffer) < min(len(demo_scenes), config.buffer_capacity) or demo_rng.random() < 0.25:
                    i = int(demo_scenes[int(demo_rng.integers(len(demo_scenes)))])
                    demo_buffer.add(demo_episode(scenes[i], i, demo_rng, config.demo_noise, env_cfg,
                                                  config.demo_random_order))
                source = demo_buffer
            else:
                k = step - config.pretrain_steps
                if k % max(config.selfplay_interval, 1) == 0 or len(buffer) == 0:
                    progress_frac = k / max(rl_steps, 1)
                    temp = search_cfg.temperature(progress_frac)
                    surrogate = step < config.curriculum_updates
                    for ep in self_play(scenes, store.snapshot(), search_cfg, 1, play_rng, temp, env_cfg, surrogate):
                        buffer.add(ep)
                if config.reanalyze_interval and k > 0 and k % config.reanalyze_interval == 0:
                    reanalyze(buffer, store.snapshot(), config.reanalyze_fraction, re_rng, search_cfg)
                source = buffer
            batch = sample_batch(source, config.batch_size, sample_rng)
            params, report = update(params, batch, lr, opt, grad_clip=config.grad_clip)
            store.publish(params)
            row = {"step": step + 1, "policy_loss": report.policy_loss, "value_loss": report.value_loss,
                   "reward_loss": report.reward_loss, "eval_return": ""}
            last = step + 1 == config.n_updates
            if eval_scenes and ((config.eval_interval and (step + 1) % config.eval_interval == 0) or last):
                row["eval_return"] = float(np.mean(evaluate_agent(params, eval_scenes, config.eval_simulations, env_cfg)))
            log.append(row)
            if writer is not None:
                writer.writerow(row)
                fh.flush()
            if progress is not None:
                progress(row)
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(params, log, buffer)


# --------------------------------------------------------------------------
# scene sets
# --------------------------------------------------------------------------


def scene_from_synthetic(scene, max_len_px: float, n_distractors: int, rng: np.random.Generator,
                         name: str = "") -> TrainScene:
    from .synthgen import oracle_graph, oracle_keypoints

    kp = oracle_keypoints(scene, max_len_px, n_distractors, rng)
    og = oracle_graph(scene, max_len_px)
    demo = tuple((int(a), int(b)) for a, b in og.edges)
    return TrainScene(np.asarray(scene.image), kp, scene.gt_graph, demo, og, name or f"seed{scene.seed}")


def scene_from_record(record) -> TrainScene:
    """Build a scene from a dataset directory record (keypoints from meta.json)."""
    from .graph import SpatialGraph as _SG
    from .synthgen import oracle_graph

    kp = record.keypoints
    if kp is None:
        raise ValueError(f"{record.path}: meta.json has no keypoints")
    demo = None
    mlen = record.meta.get("max_len_px")
    if mlen:
        og = oracle_graph(record.gt_graph, mlen)
        if og.n_vertices <= len(kp) and np.allclose(og.vertices, kp[: og.n_vertices], atol=1e-5):
            demo = tuple((int(a), int(b)) for a, b in og.edges)
    return TrainScene(record.image, kp, record.gt_graph, demo, None, str(record.path.name))


def tiny_scene_set(n: int, seed: int, max_difficulty: float = 0.2, max_len_px: float = 16.0,
                   n_distractors: int = 2, density_range: tuple[float, float] = (0.0, 0.3)) -> list[TrainScene]:
    """``n`` tiny-profile scenes with oracle keypoints and difficulty at most ``max_difficulty``."""
    from .synthgen import generate_town, scene_seed, tiny_profile

    out = []
    rng = np.random.default_rng(seed)
    index = 0
    while len(out) < n:
        if index >= 100 * n:
            raise RuntimeError(f"only {len(out)} of {n} scenes met max_difficulty={max_difficulty}")
        s = scene_seed(seed, index)
        index += 1
        density = float(rng.uniform(*density_range))
        scene = generate_town(s, tiny_profile(vegetation_density=density))
        if scene.difficulty > max_difficulty:
            continue
        out.append(scene_from_synthetic(scene, max_len_px, n_distractors, np.random.default_rng(s)))
    return out
