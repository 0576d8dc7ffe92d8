"""End-to-end pieces: keypoints from masks, agents, tiled inference with
graph fusion."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import env as env_mod
from . import mcts, nets
from .graph import SpatialGraph, build_graph, prune, rdp_simplify, subdivide_edges
from .raster import mask_to_graph, read_pgm, skeletonize
from .trainer import observation_of


class EmptyMaskError(ValueError):
    pass


@dataclass
class KeypointExtraction:
    keypoints: np.ndarray
    graph: SpatialGraph  # seed graph over the keypoints, usable as initial edges

    @property
    def initial_edges(self) -> list[tuple[int, int]]:
        return [(int(a), int(b)) for a, b in self.graph.edges]


def extract_keypoints(mask, rdp_epsilon: float = 2.0, max_edge_len: float = 20.0, threshold: int = 128,
                      min_component_len: float = 5.0) -> KeypointExtraction:
    """threshold -> skeletonize -> trace -> simplify -> subdivide -> prune.

    ``mask`` is a grayscale array or the path of a PGM file.
    """
    if isinstance(mask, (str, os.PathLike)):
        try:
            img = read_pgm(mask)
        except (OSError, ValueError) as exc:
            raise ValueError(f"cannot read mask {mask}: {exc}") from exc
    else:
        img = np.asarray(mask)
    if img.ndim != 2:
        raise ValueError("mask must be a 2-D grayscale image")
    binary = img >= threshold if img.dtype != bool else img
    if not binary.any():
        raise EmptyMaskError("mask is empty after thresholding")
    skel = skeletonize(binary)
    g = mask_to_graph(skel)
    g = rdp_simplify(g, rdp_epsilon)
    g = subdivide_edges(g, max_edge_len)
    g = prune(g, min_component_len)
    if g.n_vertices == 0:
        raise EmptyMaskError("no keypoints survived extraction")
    return KeypointExtraction(g.vertices.copy(), g)


# --------------------------------------------------------------------------
# agents
# --------------------------------------------------------------------------

# An agent maps (image, keypoints, initial_edges) to the full predicted edge set.
Agent = Callable[[np.ndarray, np.ndarray, Sequence[tuple[int, int]]], set]


def patch_env_config(n_keypoints: int, n_initial: int) -> env_mod.EnvConfig:
    base = env_mod.EnvConfig().resolve_n_max(n_keypoints)
    return env_mod.EnvConfig(n_max=max(base, n_initial + 1))


class SearchAgent:
    """Greedy (T=0, no root noise) play with search over the learned model."""

    def __init__(self, params: nets.ModelParams, search_config: mcts.SearchConfig = mcts.SearchConfig(),
                 seed: int = 0):
        self.params = params
        self.config = search_config
        self.seed = seed

    def rollout(self, image, keypoints, initial_edges=(), gt=None):
        state = env_mod.reset(image, keypoints, initial_edges, gt, patch_env_config(len(keypoints), len(initial_edges)))
        model = mcts.NetModel(self.params)
        rng = np.random.default_rng(self.seed)
        trace = []
        while not state.done:
            obs = observation_of(state)
            res = mcts.run_search(obs, model, None, self.config, rng, add_noise=False)
            t = state.t
            state, r, done = env_mod.step(state, res.best_action)
            trace.append(env_mod.Transition(t, res.best_action, r, done))
        return state, trace

    def __call__(self, image, keypoints, initial_edges=()):
        state, _ = self.rollout(image, keypoints, initial_edges)
        return set(state.edges)


class OracleAgent:
    """Connects keypoint pairs that lie (within ``tol`` px) on a common gt edge
    with no other keypoint between them; a stand-in for a perfect policy."""

    def __init__(self, gt: SpatialGraph, offset=(0.0, 0.0), tol: float = 1.0):
        self.gt = gt
        self.offset = np.asarray(offset, dtype=np.float64)
        self.tol = tol

    def __call__(self, image, keypoints, initial_edges=()):
        kp = np.asarray(keypoints, dtype=np.float64) + self.offset
        edges = {(min(a, b), max(a, b)) for a, b in initial_edges}
        for i, j in self.gt.edges:
            a, b = self.gt.vertices[i], self.gt.vertices[j]
            d = b - a
            L2 = float(d @ d)
            if L2 == 0:
                continue
            t = np.clip(((kp - a) @ d) / L2, 0.0, 1.0)
            dist = np.hypot(*(a + t[:, None] * d - kp).T)
            on = np.flatnonzero(dist <= self.tol)
            on = on[np.argsort(t[on], kind="stable")]
            for u, v in zip(on[:-1], on[1:]):
                if u != v:
                    edges.add((int(min(u, v)), int(max(u, v))))
        return edges


# --------------------------------------------------------------------------
# tiling and fusion
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TilePlan:
    width: int
    height: int
    patch_size: int
    overlap: int
    offsets: tuple[tuple[int, int], ...]  # row-major (offset_x, offset_y)

    def patch_box(self, k: int) -> tuple[int, int, int, int]:
        """``(x0, y0, x1, y1)``, half-open."""
        ox, oy = self.offsets[k]
        return ox, oy, min(ox + self.patch_size, self.width), min(oy + self.patch_size, self.height)


def _axis_offsets(length: int, patch: int, overlap: int) -> list[int]:
    if patch >= length:
        return [0]
    stride = patch - overlap
    offs = list(range(0, length - patch + 1, stride))
    if offs[-1] + patch < length:
        offs.append(length - patch)  # clamped edge patch
    return offs


def make_tile_plan(width: int, height: int, patch_size: int, overlap: int) -> TilePlan:
    if patch_size < 1 or overlap < 0 or overlap >= patch_size:
        raise ValueError("need patch_size >= 1 and 0 <= overlap < patch_size")
    xs = _axis_offsets(width, patch_size, overlap)
    ys = _axis_offsets(height, patch_size, overlap)
    return TilePlan(width, height, patch_size, overlap, tuple((x, y) for y in ys for x in xs))


def _inside(points: np.ndarray, box) -> np.ndarray:
    x0, y0, x1, y1 = box
    # right/bottom image borders are valid vertex coordinates
    return (points[:, 0] >= x0) & (points[:, 1] >= y0) & (points[:, 0] <= x1 - 1 + 1e-9) & (points[:, 1] <= y1 - 1 + 1e-9)


class _FusedGraph:
    def __init__(self, width: int, height: int):
        self.width, self.height = width, height
        self.vertices: list[tuple[float, float]] = []
        self.edges: set[tuple[int, int]] = set()

    def array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)

    def add_vertex(self, p) -> int:
        self.vertices.append((float(p[0]), float(p[1])))
        return len(self.vertices) - 1

    def snap_or_add(self, p, existing: np.ndarray, tol: float) -> int:
        if len(existing):
            d = np.hypot(existing[:, 0] - p[0], existing[:, 1] - p[1])
            k = int(np.argmin(d))
            if d[k] <= tol:
                return k
        return self.add_vertex(p)

    def graph(self) -> SpatialGraph:
        g, _ = build_graph(self.array(), sorted(self.edges), self.width, self.height)
        return g


def infer_tiled(image: np.ndarray, agent: Agent, tile_plan: TilePlan, keypoints=None,
                fusion_tolerance: float = 3.0, mode: str = "sequential", final_prune_px: float = 0.0,
                extract_kwargs: dict | None = None) -> SpatialGraph:
    """Run ``agent`` on each patch in row-major order and fuse the results.

    ``keypoints`` is a global (n, 2) array, a callable
    ``(patch_index, (ox, oy), patch_image) -> patch-coordinate keypoints``, or
    None to extract keypoints from ``image`` treated as a road mask.

    In ``sequential`` mode each patch starts from the already-fused graph
    (its vertices become patch keypoints and its edges inside the patch become
    initial edges), and new vertices snap onto fused ones within
    ``fusion_tolerance`` px. ``naive`` mode unions independent patch results.
    """
    if mode not in ("sequential", "naive"):
        raise ValueError(f"unknown fusion mode {mode!r}")
    image = np.asarray(image)
    H, W = image.shape[:2]
    if (tile_plan.width, tile_plan.height) != (W, H):
        raise ValueError("tile plan does not match the image size")
    fused = _FusedGraph(W, H)
    for k in range(len(tile_plan.offsets)):
        x0, y0, x1, y1 = box = tile_plan.patch_box(k)
        origin = np.array([x0, y0], dtype=np.float64)
        patch = image[y0:y1, x0:x1]
        if callable(keypoints):
            local = np.asarray(keypoints(k, (x0, y0), patch), dtype=np.float64).reshape(-1, 2)
        elif keypoints is None:
            try:
                local = extract_keypoints(patch, **(extract_kwargs or {})).keypoints
            except EmptyMaskError:
                local = np.zeros((0, 2))
        else:
            kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
            local = kp[_inside(kp, box)] - origin
        prev = fused.array()
        if mode == "sequential" and len(prev):
            gids = np.flatnonzero(_inside(prev, box))
            carried = prev[gids] - origin
            if len(carried) and len(local):
                d = np.hypot(local[:, None, 0] - carried[None, :, 0], local[:, None, 1] - carried[None, :, 1])
                local = local[d.min(axis=1) > fusion_tolerance]
            pos = {int(g): i for i, g in enumerate(gids)}
            init = sorted((pos[a], pos[b]) for a, b in fused.edges if a in pos and b in pos)
            patch_kp = np.vstack([carried, local]) if len(carried) else local
            to_global = list(int(g) for g in gids)
        else:
            init, patch_kp, to_global = [], local, []
        if len(patch_kp) == 0:
            continue
        edges = agent(patch, patch_kp, init)
        for p in patch_kp[len(to_global):]:
            g = p + origin
            if mode == "sequential":
                to_global.append(fused.snap_or_add(g, prev, fusion_tolerance))
            else:
                to_global.append(fused.add_vertex(g))
        for a, b in edges:
            ga, gb = to_global[a], to_global[b]
            if ga != gb:
                fused.edges.add((min(ga, gb), max(ga, gb)))
    g = fused.graph()
    return prune(g, final_prune_px) if final_prune_px > 0 else g


def plain_inference(image: np.ndarray, agent: Agent, keypoints: np.ndarray, initial_edges=()) -> SpatialGraph:
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    edges = agent(np.asarray(image), kp, list(initial_edges))
    H, W = np.asarray(image).shape[:2]
    g, _ = build_graph(kp, sorted(edges), W, H)
    return g
