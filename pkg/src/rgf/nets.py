"""Learned representation, dynamics and prediction functions.

Shapes (D = ``dim``, n = number of keypoints, S = support size):

* keypoint embeddings ``E``: (n + 1, D); the last row is the learned EOS token
* latent ``h``: (D,)
* policy logits: (n + 1,), pointer scores ``K @ (W_q h + b_q) / sqrt(D)`` where
  ``K`` is ``E`` plus per-keypoint degree embeddings and, mid-edge, embeddings
  of adjacency to and offset from the pending endpoint; the EOS key also sees
  the degree histogram
* value / reward: logits over S atoms of the transformed scalar

The edge aggregator sums a gated message per completed edge, so the latent
is independent of edge order once token position/type encodings are off.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad

SUPPORT_SIZE = 601
SUPPORT_HALF = (SUPPORT_SIZE - 1) // 2
TRANSFORM_EPS = 1e-3
N_DEGREE_BUCKETS = 5
LENGTH_BUCKET_EDGES = np.array([2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0])
REL_WAVELENGTHS = np.array([8.0, 16.0, 32.0, 64.0, 128.0])
REL_DIM = 4 * len(REL_WAVELENGTHS) + 1
CHECKPOINT_MAGIC = b"RGFCKPT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    dim: int = 128
    window: int = 9
    pe_dim: int = 16
    head_hidden: int = 64
    step_dim: int = 8
    max_tokens: int = 2 * 256 + 2
    support_size: int = SUPPORT_SIZE
    token_encodings: bool = True
    value_scale: float = 10.0  # scalar targets are multiplied by this before the transform

    @property
    def feature_in(self) -> int:
        return self.window * self.window + self.pe_dim


def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    D, H, S = cfg.dim, cfg.head_hidden, cfg.support_size
    return {
        "feat_w1": (cfg.feature_in, D), "feat_b1": (D,),
        "feat_w2": (D, D), "feat_b2": (D,),
        "eos": (D,),
        "glob_w": (D, D), "glob_b": (D,),
        "type_emb": (2, D), "pos_emb": (cfg.max_tokens, D),
        "agg_wz": (2 * D, D), "agg_bz": (D,),
        "agg_wu": (2 * D, D), "agg_bu": (D,),
        "read_w": (3 * D, D), "read_b": (D,),
        "pol_w": (D, D), "pol_b": (D,),
        "key_deg": (N_DEGREE_BUCKETS, D), "key_adj": (D,),
        "rel_w": (REL_DIM, D), "rel_b": (D,),
        "eos_hist": (N_DEGREE_BUCKETS, D),
        "val_w1": (D + cfg.step_dim + N_DEGREE_BUCKETS, H), "val_b1": (H,),
        "val_w2": (H, S), "val_b2": (S,),
        "dyn_deg": (N_DEGREE_BUCKETS, D), "dyn_len": (len(LENGTH_BUCKET_EDGES) + 1, D),
        "gru_wx": (D, 3 * D), "gru_wh": (D, 3 * D), "gru_b": (3 * D,),
        "rew_w1": (D, H), "rew_b1": (H,),
        "rew_w2": (H, S), "rew_b2": (S,),
    }


_ZERO_INIT = {"val_w2", "val_b2", "rew_w2", "rew_b2", "pol_w"}
_EMBED_INIT = {"eos", "type_emb", "pos_emb", "dyn_deg", "dyn_len", "key_deg", "key_adj", "eos_hist"}


@dataclass
class ModelParams:
    config: NetConfig
    arrays: dict[str, np.ndarray]
    version: int = 0

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()}, self.version)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()}, self.version)

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())


def init_params(config: NetConfig = NetConfig(), seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name in _ZERO_INIT or (len(shape) == 1 and name not in _EMBED_INIT):
            arr = np.zeros(shape)
        elif name in _EMBED_INIT:
            arr = rng.normal(0.0, 0.1, size=shape)
        else:
            fan_in, fan_out = shape[0], shape[-1]
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-lim, lim, size=shape)
        if name in ("val_b2", "rew_b2"):
            arr = support_bump(config.support_size)
        arrays[name] = arr.astype(dtype)
    return ModelParams(config, arrays)


def support_bump(size: int = SUPPORT_SIZE, rate: float = 0.5) -> np.ndarray:
    """Symmetric logits peaked at the zero atom: the initial prediction decodes
    to exactly 0, yet softmax gradients are not spread over every atom."""
    half = (size - 1) // 2
    return -rate * np.abs(np.arange(-half, half + 1, dtype=np.float64))


# --------------------------------------------------------------------------
# scalar transform and support codec
# --------------------------------------------------------------------------


def transform_value(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * (np.sqrt(np.abs(x) + 1.0) - 1.0) + TRANSFORM_EPS * x


def inverse_transform(y):
    y = np.asarray(y, dtype=np.float64)
    e = TRANSFORM_EPS
    s = (np.sqrt(1.0 + 4.0 * e * (np.abs(y) + 1.0 + e)) - 1.0) / (2.0 * e)
    return np.sign(y) * (s * s - 1.0)


def support_encode(scalar, size: int = SUPPORT_SIZE) -> np.ndarray:
    """Two-hot encoding of ``transform_value(scalar)`` over integer atoms."""
    half = (size - 1) // 2
    y = np.atleast_1d(transform_value(scalar))
    if not np.all(np.isfinite(y)):
        raise ValueError("cannot encode a non-finite scalar")
    if np.any(np.abs(y) > half):
        warnings.warn(f"transformed value outside [-{half}, {half}] clamped", RuntimeWarning, stacklevel=2)
    y = np.clip(y, -half, half)
    lo = np.floor(y)
    frac = y - lo
    out = np.zeros(y.shape + (size,))
    rows = np.arange(len(y))
    lo_i = (lo + half).astype(np.int64)
    out[rows, lo_i] = 1.0 - frac
    hi_i = np.minimum(lo_i + 1, size - 1)
    out[rows, hi_i] += frac
    return out[0] if np.ndim(scalar) == 0 else out


def support_decode(dist) -> np.ndarray | float:
    dist = np.asarray(dist, dtype=np.float64)
    size = dist.shape[-1]
    half = (size - 1) // 2
    atoms = np.arange(-half, half + 1, dtype=np.float64)
    y = dist @ atoms
    x = inverse_transform(y)
    return float(x) if np.ndim(x) == 0 else x


# --------------------------------------------------------------------------
# inputs
# --------------------------------------------------------------------------


def position_encoding(xy: np.ndarray, width: float, height: float, dim: int = 16) -> np.ndarray:
    """Sinusoidal encoding of pixel positions normalized by image size."""
    per = dim // 2
    freqs = (2.0 ** np.arange(per // 2)) * math.pi
    out = []
    for c, size in ((xy[:, 0], width), (xy[:, 1], height)):
        u = c[:, None] / max(size, 1.0)
        out.append(np.sin(u * freqs))
        out.append(np.cos(u * freqs))
    return np.concatenate(out, axis=1)


def keypoint_windows(image: np.ndarray, keypoints: np.ndarray, window: int = 9) -> np.ndarray:
    """Flattened edge-clamped windows of the standardized image, one per keypoint."""
    img = np.asarray(image, dtype=np.float64) / 255.0
    img = (img - img.mean()) / max(img.std(), 0.05)
    h, w = img.shape
    r = window // 2
    c = np.floor(np.asarray(keypoints, dtype=np.float64) + 0.5).astype(np.int64)
    off = np.arange(-r, r + 1)
    ys = np.clip(c[:, 1][:, None] + off[None, :], 0, h - 1)
    xs = np.clip(c[:, 0][:, None] + off[None, :], 0, w - 1)
    return img[ys[:, :, None], xs[:, None, :]].reshape(len(c), -1)


def step_encoding(t: int, t_max: int, dim: int = 8) -> np.ndarray:
    feats = [t / max(t_max, 1), float(t % 2)]
    k = 0
    while len(feats) < dim:
        scale = 2.0 * 4.0 ** (k // 2)
        feats.append(math.sin(t / scale) if k % 2 == 0 else math.cos(t / scale))
        k += 1
    return np.asarray(feats[:dim])


def relative_encoding(offsets: np.ndarray) -> np.ndarray:
    """Sinusoidal encoding of pixel offsets (n, 2) plus their scaled length."""
    w = 2.0 * math.pi / REL_WAVELENGTHS
    dx = offsets[:, :1] * w
    dy = offsets[:, 1:2] * w
    dist = np.hypot(offsets[:, 0], offsets[:, 1])[:, None] / 32.0
    return np.concatenate([np.sin(dx), np.cos(dx), np.sin(dy), np.cos(dy), dist], axis=1)


def degree_bucket(d: int) -> int:
    return min(int(d), N_DEGREE_BUCKETS - 1)


def length_bucket(length: float) -> int:
    return int(np.searchsorted(LENGTH_BUCKET_EDGES, length, side="right"))


# --------------------------------------------------------------------------
# forward functions (arrays or ad.Var parameters)
# --------------------------------------------------------------------------


@dataclass
class KeypointFeatures:
    embeddings: object  # (n + 1, D), array or Var
    h0: object  # (D,)


def extract_keypoint_features(image, keypoints, params, P=None) -> KeypointFeatures:
    """Per-keypoint embeddings (plus the EOS row) and the initial latent."""
    P = params.arrays if P is None else P
    cfg = params.config
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    h, w = np.asarray(image).shape[:2]
    dt = params.dtype
    f = np.concatenate([keypoint_windows(image, kp, cfg.window),
                        position_encoding(kp, w, h, cfg.pe_dim)], axis=1).astype(dt)
    hidden = ad.tanh(ad.add(ad.matmul(f, P["feat_w1"]), P["feat_b1"]))
    emb = ad.add(ad.matmul(hidden, P["feat_w2"]), P["feat_b2"])
    eos = P["eos"]
    E = ad.concat([emb, eos[None, :] if not isinstance(eos, ad.Var) else _row(eos)], axis=0)
    h0 = ad.tanh(ad.add(ad.matmul(ad.mean_rows(hidden), P["glob_w"]), P["glob_b"]))
    return KeypointFeatures(E, h0)


def _row(v: ad.Var) -> ad.Var:
    out = v.value[None, :]
    return ad.Var(out, (v,), lambda g: ad._accum(v, g[0]))


@dataclass(frozen=True, eq=False)
class LatentState:
    h: object
    embeddings: object
    t: int
    t_max: int
    pending: int | None
    degrees: tuple[int, ...]
    edges: frozenset
    keypoints: np.ndarray
    terminal: bool = False

    @property
    def parity(self) -> str:
        return "odd" if self.t % 2 else "even"

    @property
    def n_actions(self) -> int:
        return len(self.keypoints) + 1

    def legal_mask(self) -> np.ndarray:
        n = len(self.keypoints)
        mask = np.ones(n + 1, dtype=bool)
        if self.t % 2 == 1:
            mask[n] = False
            if self.pending is not None:
                mask[self.pending] = False
        elif self.t >= self.t_max - 1:
            mask[:n] = False
        return mask


def _token_rows(params, P, tokens: Sequence[int], E, start: int = 0):
    X = ad.take_rows(E, list(tokens))
    if params.config.token_encodings and len(tokens):
        pos = np.minimum(np.arange(start, start + len(tokens)), params.config.max_tokens - 1)
        X = ad.add(X, ad.take_rows(P["type_emb"], pos % 2))
        X = ad.add(X, ad.take_rows(P["pos_emb"], pos))
    return X


def represent(observation, params: ModelParams, features: KeypointFeatures | None = None, P=None) -> LatentState:
    """Fold the current edge-token list into a latent state.

    ``observation`` needs ``image``, ``keypoints``, ``edge_tokens`` and
    ``t_max`` (an :class:`rgf.env.EnvState` qualifies).
    """
    P = params.arrays if P is None else P
    if features is None:
        features = extract_keypoint_features(observation.image, observation.keypoints, params, P)
    kp = np.asarray(observation.keypoints, dtype=np.float64).reshape(-1, 2)
    n = len(kp)
    tokens = [int(a) for a in observation.edge_tokens if int(a) != n]
    if any(a < 0 or a > n for a in tokens):
        raise IndexError(f"edge token out of range for {n} keypoints")
    D = params.config.dim
    dt = params.dtype
    E = features.embeddings
    L = len(tokens)
    n_pairs = L // 2
    degrees = [0] * n
    edges: set[tuple[int, int]] = set()
    for a, b in zip(tokens[0 : 2 * n_pairs : 2], tokens[1 : 2 * n_pairs : 2]):
        key = (min(a, b), max(a, b))
        if a != b and key not in edges:
            edges.add(key)
            degrees[a] += 1
            degrees[b] += 1
    if L:
        X = _token_rows(params, P, tokens, E)
    if n_pairs:
        A = ad.take_rows(X, list(range(0, 2 * n_pairs, 2)))
        B = ad.take_rows(X, list(range(1, 2 * n_pairs, 2)))
        M = ad.concat([ad.add(A, B), ad.mul(A, B)], axis=1)
        Z = ad.sigmoid(ad.add(ad.matmul(M, P["agg_wz"]), P["agg_bz"]))
        U = ad.tanh(ad.add(ad.matmul(M, P["agg_wu"]), P["agg_bu"]))
        s = ad.sum_rows(ad.mul(Z, U))
    else:
        s = np.zeros(D, dtype=dt)
    if L % 2 == 1:
        pend = ad.take_rows(X, [L - 1])
        pend = _flatten_row(pend)
        pending = tokens[-1]
    else:
        pend = np.zeros(D, dtype=dt)
        pending = None
    h = ad.tanh(ad.add(ad.matmul(ad.concat([features.h0, s, pend]), P["read_w"]), P["read_b"]))
    terminal = len(observation.edge_tokens) > 0 and int(observation.edge_tokens[-1]) == n
    return LatentState(h, E, len(observation.edge_tokens), int(observation.t_max), pending,
                       tuple(degrees), frozenset(edges), kp, terminal)


def _flatten_row(x):
    if not isinstance(x, ad.Var):
        return x[0]
    return ad.Var(x.value[0], (x,), lambda g: ad._accum(x, g[None, :]))


def pointer_keys(latent: LatentState, params: ModelParams, P=None):
    """Keypoint embeddings plus embeddings of each keypoint's current degree
    and, while an edge is pending, of adjacency to the pending endpoint and
    of the offset from it. The EOS row gets a projection of the degree
    histogram, a cheap progress signal."""
    P = params.arrays if P is None else P
    n = len(latent.keypoints)
    buckets = np.minimum(np.asarray(latent.degrees, dtype=np.int64), N_DEGREE_BUCKETS - 1)
    extra = ad.take_rows(P["key_deg"], buckets)
    if latent.pending is not None:
        adj = np.zeros((n, 1), dtype=params.dtype)
        for a, b in latent.edges:
            if a == latent.pending:
                adj[b] = 1.0
            elif b == latent.pending:
                adj[a] = 1.0
        extra = ad.add(extra, ad.mul(adj, P["key_adj"]))
        rel = relative_encoding(latent.keypoints - latent.keypoints[latent.pending]).astype(params.dtype)
        extra = ad.add(extra, ad.tanh(ad.add(ad.matmul(rel, P["rel_w"]), P["rel_b"])))
    eos_row = ad.matmul(degree_histogram(latent)[None, :].astype(params.dtype), P["eos_hist"])
    return ad.add(latent.embeddings, ad.concat([extra, eos_row], axis=0))


def degree_histogram(latent: LatentState) -> np.ndarray:
    """Fraction of keypoints in each degree bucket."""
    buckets = np.minimum(np.asarray(latent.degrees, dtype=np.int64), N_DEGREE_BUCKETS - 1)
    return np.bincount(buckets, minlength=N_DEGREE_BUCKETS) / max(len(buckets), 1)


def predict_logits(latent: LatentState, params: ModelParams, step_t: int | None = None, P=None):
    P = params.arrays if P is None else P
    D = params.config.dim
    t = latent.t if step_t is None else int(step_t)
    q = ad.add(ad.matmul(latent.h, P["pol_w"]), P["pol_b"])
    logits = ad.scale(ad.matmul(pointer_keys(latent, params, P), q), 1.0 / math.sqrt(D))
    se = step_encoding(t, latent.t_max, params.config.step_dim).astype(params.dtype)
    v_in = ad.concat([latent.h, se, degree_histogram(latent).astype(params.dtype)])
    v_hidden = ad.tanh(ad.add(ad.matmul(v_in, P["val_w1"]), P["val_b1"]))
    v_logits = ad.add(ad.matmul(v_hidden, P["val_w2"]), P["val_b2"])
    return logits, v_logits


def decode_scalar(dist, params: ModelParams) -> float:
    """Expected scalar of a predicted support, in environment units."""
    return support_decode(dist) / params.config.value_scale


def predict(latent: LatentState, params: ModelParams, step_t: int | None = None):
    """Policy logits over all actions and the value support distribution."""
    logits, v_logits = predict_logits(latent, params, step_t)
    return np.asarray(logits), ad.softmax(np.asarray(v_logits, dtype=np.float64))


def dynamics_logits(latent: LatentState, action: int, params: ModelParams, P=None):
    P = params.arrays if P is None else P
    D = params.config.dim
    n = len(latent.keypoints)
    action = int(action)
    if not 0 <= action <= n:
        raise IndexError(f"action {action} out of range for {n} keypoints")
    x = _flatten_row(_token_rows(params, P, [action], latent.embeddings, start=latent.t))
    degrees, edges, pending = latent.degrees, latent.edges, None
    completing = latent.t % 2 == 1 and action != n and latent.pending is not None
    if completing:
        a, b = latent.pending, action
        x = ad.add(x, P["dyn_deg"][degree_bucket(degrees[a])] if not isinstance(P["dyn_deg"], ad.Var)
                   else _flatten_row(ad.take_rows(P["dyn_deg"], [degree_bucket(degrees[a])])))
        x = ad.add(x, P["dyn_deg"][degree_bucket(degrees[b])] if not isinstance(P["dyn_deg"], ad.Var)
                   else _flatten_row(ad.take_rows(P["dyn_deg"], [degree_bucket(degrees[b])])))
        length = float(np.hypot(*(latent.keypoints[a] - latent.keypoints[b])))
        lb = length_bucket(length)
        x = ad.add(x, P["dyn_len"][lb] if not isinstance(P["dyn_len"], ad.Var)
                   else _flatten_row(ad.take_rows(P["dyn_len"], [lb])))
        key = (min(a, b), max(a, b))
        if a != b and key not in edges:
            d = list(degrees)
            d[a] += 1
            d[b] += 1
            degrees, edges = tuple(d), edges | {key}
    elif latent.t % 2 == 0 and action != n:
        pending = action
    h = latent.h
    gx = ad.add(ad.matmul(x, P["gru_wx"]), P["gru_b"])
    gh = ad.matmul(h, P["gru_wh"])
    gx_rz, gx_n = _split(gx, 2 * D)
    gh_rz, gh_n = _split(gh, 2 * D)
    rz = ad.sigmoid(ad.add(gx_rz, gh_rz))
    r, z = _split(rz, D)
    cand = ad.tanh(ad.add(gx_n, ad.mul(r, gh_n)))
    h_new = ad.add(cand, ad.mul(z, ad.sub(h, cand)))
    r_hidden = ad.tanh(ad.add(ad.matmul(h_new, P["rew_w1"]), P["rew_b1"]))
    r_logits = ad.add(ad.matmul(r_hidden, P["rew_w2"]), P["rew_b2"])
    nxt = LatentState(h_new, latent.embeddings, latent.t + 1, latent.t_max, pending, degrees, edges,
                      latent.keypoints, terminal=action == n)
    return nxt, r_logits


def _split(x, k: int):
    v = ad.val(x)
    a, b = v[:k], v[k:]
    if not isinstance(x, ad.Var):
        return a, b
    n = v.shape[0]

    def bw_a(g):
        full = np.zeros(n, dtype=v.dtype)
        full[:k] = g
        ad._accum(x, full)

    def bw_b(g):
        full = np.zeros(n, dtype=v.dtype)
        full[k:] = g
        ad._accum(x, full)

    return ad.Var(a, (x,), bw_a), ad.Var(b, (x,), bw_b)


def dynamics(latent: LatentState, action: int, params: ModelParams):
    """Next latent state and the reward support distribution for ``action``."""
    nxt, r_logits = dynamics_logits(latent, action, params)
    return nxt, ad.softmax(np.asarray(r_logits, dtype=np.float64))


# --------------------------------------------------------------------------
# loss and gradients
# --------------------------------------------------------------------------


@dataclass
class TrainSample:
    """One unrolled training target rooted at an observation.

    ``policy_targets`` / ``value_targets`` have one entry per latent
    (root + each unrolled action), ``reward_targets`` one per action.
    """
    image: np.ndarray
    keypoints: np.ndarray
    edge_tokens: tuple[int, ...]
    t_max: int
    actions: list[int]
    policy_targets: np.ndarray
    policy_mask: np.ndarray
    value_targets: np.ndarray
    value_mask: np.ndarray
    reward_targets: np.ndarray
    reward_mask: np.ndarray
    weight: float = 1.0


@dataclass(frozen=True)
class LossSpec:
    policy_weight: float = 1.0
    value_weight: float = 1.0
    reward_weight: float = 1.0


@dataclass
class LossReport:
    policy_loss: float
    value_loss: float
    reward_loss: float

    @property
    def total(self) -> float:
        return self.policy_loss + self.value_loss + self.reward_loss


def _sample_terms(sample: TrainSample, params: ModelParams, P, loss: LossSpec, scale: float):
    S = params.config.support_size
    vs = params.config.value_scale
    pol, vals, rews = [], [], []
    latent = represent(sample, params, P=P)
    w = sample.weight * scale
    for k in range(len(sample.actions) + 1):
        if k > 0:
            latent, r_logits = dynamics_logits(latent, sample.actions[k - 1], params, P)
            if sample.reward_mask[k - 1] and loss.reward_weight:
                target = support_encode(sample.reward_targets[k - 1] * vs, S)
                rews.append(ad.softmax_mse(r_logits, target, w * loss.reward_weight))
        need_pol = sample.policy_mask[k] and loss.policy_weight
        need_val = sample.value_mask[k] and loss.value_weight
        if not (need_pol or need_val):
            continue
        logits, v_logits = predict_logits(latent, params, P=P)
        if need_pol:
            pol.append(ad.softmax_cross_entropy(logits, np.asarray(sample.policy_targets[k], dtype=np.float64),
                                                w * loss.policy_weight, mask=latent.legal_mask()))
        if need_val:
            target = support_encode(sample.value_targets[k] * vs, S)
            vals.append(ad.softmax_mse(v_logits, target, w * loss.value_weight))
    return pol, vals, rews


def loss_and_grads(params: ModelParams, batch: Sequence[TrainSample], loss_spec: LossSpec = LossSpec(),
                   need_grads: bool = True):
    P = {k: ad.Var(v) for k, v in params.arrays.items()} if need_grads else params.arrays
    scale = 1.0 / max(len(batch), 1)
    pol, vals, rews = [], [], []
    for sample in batch:
        p, v, r = _sample_terms(sample, params, P, loss_spec, scale)
        pol += p
        vals += v
        rews += r
    parts = {}
    for name, terms in (("policy", pol), ("value", vals), ("reward", rews)):
        parts[name] = ad.total(terms) if terms else np.asarray(0.0)
        value = float(ad.val(parts[name]))
        if not math.isfinite(value):
            raise FloatingPointError(f"{name} loss is not finite ({value})")
    report = LossReport(float(ad.val(parts["policy"])), float(ad.val(parts["value"])), float(ad.val(parts["reward"])))
    if not need_grads:
        return report, None
    loss = ad.total([t for t in parts.values() if isinstance(t, ad.Var)])
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    if isinstance(loss, ad.Var):
        ad.backward(loss)
        for k, var in P.items():
            if var.grad is not None:
                grads[k] = var.grad.astype(params.dtype, copy=False)
    return report, grads


def backward(params: ModelParams, batch: Sequence[TrainSample], loss_spec: LossSpec = LossSpec()):
    """Exact gradients of the composite unrolled loss for every parameter."""
    _, grads = loss_and_grads(params, batch, loss_spec)
    return grads


def loss_value(params: ModelParams, batch: Sequence[TrainSample], loss_spec: LossSpec = LossSpec()) -> float:
    report, _ = loss_and_grads(params, batch, loss_spec, need_grads=False)
    return report.total


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(path: str | os.PathLike, params: ModelParams, extra: dict | None = None) -> None:
    """Write ``magic | u64 header length | JSON header | little-endian f32 arrays``."""
    manifest = []
    offset = 0
    blobs = []
    for name in sorted(params.arrays):
        arr = np.ascontiguousarray(params.arrays[name], dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
        blobs.append(arr.tobytes())
    header = {
        "version": CHECKPOINT_VERSION,
        "dims": asdict(params.config),
        "param_version": params.version,
        "layers": manifest,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    cfg = NetConfig(**header["dims"])
    expected = param_shapes(cfg)
    body = data[16 + hlen :]
    arrays = {}
    for layer in header["layers"]:
        name, shape = layer["name"], tuple(layer["shape"])
        if name not in expected or expected[name] != shape:
            raise CheckpointError(f"{path}: layer {name} shape {shape} does not match dims {expected.get(name)}")
        raw = body[layer["offset"] : layer["offset"] + layer["nbytes"]]
        if len(raw) != layer["nbytes"]:
            raise CheckpointError(f"{path}: truncated data for layer {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    missing = set(expected) - set(arrays)
    if missing:
        raise CheckpointError(f"{path}: missing layers {sorted(missing)}")
    return ModelParams(cfg, arrays, int(header.get("param_version", 0))), header.get("extra", {})


# --------------------------------------------------------------------------
# cost audit
# --------------------------------------------------------------------------


class MacCounter:
    """Counts multiply-accumulates of every matmul executed inside the block."""

    def __init__(self):
        self.macs = 0

    def __enter__(self):
        self._orig = ad.matmul

        def counting(a, b):
            av, bv = ad.val(a), ad.val(b)
            m = av.shape[0] if av.ndim == 2 else 1
            k = av.shape[-1]
            n = bv.shape[1] if bv.ndim == 2 else 1
            self.macs += m * k * n
            return self._orig(a, b)

        ad.matmul = counting
        return self

    def __exit__(self, *exc):
        ad.matmul = self._orig
        return False


def static_macs(config: NetConfig, n_keypoints: int, n_tokens: int) -> dict[str, int]:
    """Closed-form multiply-accumulate counts per function call."""
    D, H, S = config.dim, config.head_hidden, config.support_size
    pairs = n_tokens // 2
    features = n_keypoints * (config.feature_in * D + D * D) + D * D
    represent_ = pairs * 2 * (2 * D * D) + 3 * D * D
    dynamics_ = 2 * D * 3 * D + D * H + H * S
    predict_ = (D * D + N_DEGREE_BUCKETS * D + (n_keypoints + 1) * D
                + (D + config.step_dim + N_DEGREE_BUCKETS) * H + H * S)
    if n_tokens % 2 == 1:  # offsets from the pending endpoint
        predict_ += n_keypoints * REL_DIM * D
    return {"features": features, "represent": represent_, "dynamics": dynamics_, "predict": predict_}
