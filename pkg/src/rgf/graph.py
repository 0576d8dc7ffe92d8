"""Planar spatial graphs of road keypoints and the vector-side operations on them.

Vertices are pixel coordinates (x, y) with (0, 0) the top-left pixel center.
Edges are unordered index pairs stored canonically as ``i < j`` and sorted
lexicographically, so two graphs with the same content compare equal and
serialize to identical bytes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components


class GraphValidationError(ValueError):
    """Raised when graph input violates an index or coordinate constraint."""


@dataclass(frozen=True, eq=False)
class SpatialGraph:
    width: int
    height: int
    vertices: np.ndarray
    edges: np.ndarray

    def __post_init__(self):
        verts = np.array(self.vertices, dtype=np.float64).reshape(-1, 2)
        edges = np.array(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(edges):
            edges = np.sort(edges, axis=1)
            edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
        verts.setflags(write=False)
        edges.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "edges", edges)
        _validate(self)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_vertices, dtype=np.int64)
        if self.n_edges:
            np.add.at(deg, self.edges.ravel(), 1)
        deg.setflags(write=False)
        return deg

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        if not self.n_edges:
            return np.zeros(0)
        d = self.vertices[self.edges[:, 0]] - self.vertices[self.edges[:, 1]]
        out = np.hypot(d[:, 0], d[:, 1])
        out.setflags(write=False)
        return out

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        adj: list[list[int]] = [[] for _ in range(self.n_vertices)]
        for i, j in self.edges.tolist():
            adj[i].append(j)
            adj[j].append(i)
        return tuple(tuple(sorted(a)) for a in adj)

    @cached_property
    def edge_index(self) -> dict[tuple[int, int], int]:
        return {(int(i), int(j)): k for k, (i, j) in enumerate(self.edges)}

    def weighted_adjacency(self) -> csr_matrix:
        n = self.n_vertices
        if not self.n_edges:
            return csr_matrix((n, n))
        i, j = self.edges[:, 0], self.edges[:, 1]
        w = np.maximum(self.edge_lengths, 1e-12)
        return csr_matrix((np.r_[w, w], (np.r_[i, j], np.r_[j, i])), shape=(n, n))

    def total_length(self) -> float:
        return float(self.edge_lengths.sum())

    def has_edge(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in self.edge_index

    def __eq__(self, other):
        if not isinstance(other, SpatialGraph):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.edges, other.edges)
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self):
        return f"SpatialGraph({self.width}x{self.height}, |V|={self.n_vertices}, |E|={self.n_edges})"


def _validate(g: SpatialGraph) -> None:
    if int(g.width) <= 0 or int(g.height) <= 0:
        raise GraphValidationError(f"image size must be positive, got {g.width}x{g.height}")
    v = g.vertices
    if len(v):
        if not np.all(np.isfinite(v)):
            k = int(np.argwhere(~np.isfinite(v))[0, 0])
            raise GraphValidationError(f"vertex {k} has a non-finite coordinate")
        bad = (v[:, 0] < 0) | (v[:, 0] > g.width) | (v[:, 1] < 0) | (v[:, 1] > g.height)
        if bad.any():
            k = int(np.argmax(bad))
            raise GraphValidationError(
                f"vertex {k} at ({v[k, 0]}, {v[k, 1]}) lies outside [0, {g.width}] x [0, {g.height}]"
            )
    e = g.edges
    if len(e):
        bad = (e < 0) | (e >= len(v))
        if bad.any():
            k = int(np.argwhere(bad)[0, 0])
            raise GraphValidationError(f"edge {k} {e[k].tolist()} references a missing vertex")
        if np.any(e[:, 0] == e[:, 1]):
            k = int(np.argmax(e[:, 0] == e[:, 1]))
            raise GraphValidationError(f"edge {k} is a self-loop on vertex {e[k, 0]}")
        if len(e) > 1 and np.any(np.all(e[1:] == e[:-1], axis=1)):
            raise GraphValidationError("duplicate edges")


def build_graph(vertices, edges, width: int, height: int) -> tuple[SpatialGraph, int]:
    """Validate raw input, dropping self-loops and duplicate pairs.

    Returns the graph and the number of dropped edges.
    """
    verts = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
    raw = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    n = len(verts)
    bad = (raw < 0) | (raw >= n)
    if bad.any():
        k = int(np.argwhere(bad)[0, 0])
        raise GraphValidationError(f"edge {k} {raw[k].tolist()} references a missing vertex (|V|={n})")
    kept = raw[raw[:, 0] != raw[:, 1]]
    if len(kept):
        kept = np.unique(np.sort(kept, axis=1), axis=0)
    dropped = len(raw) - len(kept)
    return SpatialGraph(int(width), int(height), verts, kept), dropped


def empty_like(graph: SpatialGraph, keep_vertices: bool = False) -> SpatialGraph:
    verts = graph.vertices if keep_vertices else np.zeros((0, 2))
    return SpatialGraph(graph.width, graph.height, verts, np.zeros((0, 2), dtype=np.int64))


def vertex_degree(graph: SpatialGraph, index: int) -> int:
    if not 0 <= index < graph.n_vertices:
        raise IndexError(f"vertex index {index} out of range for {graph.n_vertices} vertices")
    return int(graph.degrees[index])


def n_components(graph: SpatialGraph, ignore_isolated: bool = True) -> int:
    """Number of connected components, by default counting only those with edges."""
    if graph.n_vertices == 0:
        return 0
    n, labels = connected_components(graph.weighted_adjacency(), directed=False)
    if not ignore_isolated:
        return int(n)
    used = np.unique(labels[graph.degrees > 0])
    return len(used)


# --------------------------------------------------------------------------
# road segments
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RoadSegment:
    vertex_indices: tuple[int, ...]
    is_loop: bool = False

    @property
    def n_edges(self) -> int:
        return len(self.vertex_indices) - 1


def road_segments(graph: SpatialGraph) -> list[RoadSegment]:
    """Partition the edge set into maximal chains through degree-2 vertices."""
    deg = graph.degrees
    nbrs = graph.neighbors
    used: set[tuple[int, int]] = set()
    segments: list[RoadSegment] = []

    def walk(start: int, nxt: int) -> list[int]:
        path = [start, nxt]
        used.add((min(start, nxt), max(start, nxt)))
        prev, cur = start, nxt
        while deg[cur] == 2 and cur != start:
            a, b = nbrs[cur]
            step = b if a == prev else a
            key = (min(cur, step), max(cur, step))
            if key in used:
                break
            used.add(key)
            path.append(step)
            prev, cur = cur, step
        return path

    for v in range(graph.n_vertices):
        if deg[v] == 2 or deg[v] == 0:
            continue
        for u in nbrs[v]:
            if (min(u, v), max(u, v)) in used:
                continue
            path = walk(v, u)
            segments.append(RoadSegment(tuple(path), is_loop=path[0] == path[-1]))

    # whatever remains are cycles made only of degree-2 vertices
    for i, j in graph.edges.tolist():
        if (i, j) in used:
            continue
        path = walk(i, j)
        segments.append(RoadSegment(tuple(path), is_loop=True))
    return segments


# --------------------------------------------------------------------------
# polyline helpers
# --------------------------------------------------------------------------


def point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances from points ``p`` (k, 2) to the closed segment a-b."""
    p = np.atleast_2d(p)
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(*(p - a).T)
    t = np.clip(((p - a) @ ab) / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.hypot(*(p - proj).T)


def rdp_indices(points: np.ndarray, epsilon: float) -> list[int]:
    """Indices of the points kept by Ramer-Douglas-Peucker (iterative)."""
    n = len(points)
    if n <= 2:
        return list(range(n))
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        d = point_segment_distance(points[lo + 1 : hi], points[lo], points[hi])
        k = int(np.argmax(d))
        if d[k] > epsilon:
            mid = lo + 1 + k
            keep[mid] = True
            stack.append((lo, mid))
            stack.append((mid, hi))
    return np.flatnonzero(keep).tolist()


def _farthest_interior(points: np.ndarray, lo: int, hi: int) -> int:
    d = point_segment_distance(points[lo + 1 : hi], points[lo], points[hi])
    return lo + 1 + int(np.argmax(d))


def simplify_chain(points: np.ndarray, epsilon: float, closed: bool, taken: set | None = None,
                   ids: Sequence | None = None) -> list[int]:
    """RDP for a chain whose endpoints are anchored.

    ``closed`` chains (first == last) keep at least two interior points so
    the result is still a simple cycle. When ``taken`` holds already-emitted
    endpoint pairs (keyed by ``ids``), a chain that would collapse onto an
    existing edge keeps its farthest interior point instead.
    """
    n = len(points)
    if n <= 2:
        return list(range(n))
    if closed:
        if n < 4:
            return list(range(n))
        d = np.hypot(*(points[1:-1] - points[0]).T)
        far = 1 + int(np.argmax(d))
        left = rdp_indices(points[: far + 1], epsilon)
        right = [far + k for k in rdp_indices(points[far:], epsilon)]
        keep = left + right[1:]
        if len(keep) < 4:
            # need a third distinct vertex; take the farthest one on the longer half
            if far >= 2:
                extra = _farthest_interior(points, 0, far)
            else:
                extra = _farthest_interior(points, far, n - 1)
            keep = sorted(set(keep) | {extra})
        return keep
    keep = rdp_indices(points, epsilon)
    if len(keep) == 2 and taken is not None and ids is not None:
        key = (min(ids[0], ids[-1]), max(ids[0], ids[-1]))
        if key in taken:
            keep = [0, _farthest_interior(points, 0, n - 1), n - 1]
    return keep


def rdp_simplify(graph: SpatialGraph, epsilon_px: float) -> SpatialGraph:
    """Simplify every road segment; vertices of degree != 2 are never removed."""
    if epsilon_px < 0:
        raise ValueError("epsilon_px must be >= 0")
    if epsilon_px == 0 or graph.n_edges == 0:
        return graph
    keep_vertex = graph.degrees != 2
    new_edges: list[tuple[int, int]] = []
    taken: set[tuple[int, int]] = set()
    segs = road_segments(graph)
    # short segments first so a parallel pair keeps the longer one's detail
    for seg in sorted(segs, key=lambda s: (len(s.vertex_indices), s.vertex_indices)):
        ids = list(seg.vertex_indices)
        pts = graph.vertices[ids]
        keep = simplify_chain(pts, epsilon_px, closed=ids[0] == ids[-1], taken=taken, ids=ids)
        chosen = [ids[k] for k in keep]
        keep_vertex[chosen] = True
        for a, b in zip(chosen[:-1], chosen[1:]):
            key = (min(a, b), max(a, b))
            taken.add(key)
            new_edges.append(key)
    return _reindex(graph, keep_vertex, new_edges)


def _reindex(graph: SpatialGraph, keep_vertex: np.ndarray, edges: Iterable[tuple[int, int]]) -> SpatialGraph:
    remap = -np.ones(graph.n_vertices, dtype=np.int64)
    idx = np.flatnonzero(keep_vertex)
    remap[idx] = np.arange(len(idx))
    e = np.array([(remap[a], remap[b]) for a, b in edges], dtype=np.int64).reshape(-1, 2)
    g, _ = build_graph(graph.vertices[idx], e, graph.width, graph.height)
    return g


def subdivide_edges(graph: SpatialGraph, max_len_px: float) -> SpatialGraph:
    """Split each edge longer than ``max_len_px`` into equal collinear pieces."""
    if max_len_px <= 0:
        raise ValueError("max_len_px must be > 0")
    verts = [tuple(v) for v in graph.vertices.tolist()]
    edges: list[tuple[int, int]] = []
    for (i, j), length in zip(graph.edges.tolist(), graph.edge_lengths.tolist()):
        pieces = max(1, math.ceil(length / max_len_px - 1e-9))
        if pieces == 1:
            edges.append((i, j))
            continue
        a, b = graph.vertices[i], graph.vertices[j]
        prev = i
        for k in range(1, pieces):
            t = k / pieces
            verts.append(tuple(a + t * (b - a)))
            cur = len(verts) - 1
            edges.append((prev, cur))
            prev = cur
        edges.append((prev, j))
    g, _ = build_graph(verts, edges, graph.width, graph.height)
    return g


def prune(graph: SpatialGraph, min_component_len_px: float, remove_dead_ends: bool = False,
          dead_end_max_len_px: float | None = None) -> SpatialGraph:
    """Drop edges of small components and, optionally, dead-end spurs.

    A spur is a road segment running from a degree-1 vertex to a junction
    (degree >= 3) and shorter than ``dead_end_max_len_px`` (defaults to
    ``min_component_len_px``). Vertices are always retained.
    """
    if graph.n_edges == 0:
        return graph
    drop = np.zeros(graph.n_edges, dtype=bool)
    n, labels = connected_components(graph.weighted_adjacency(), directed=False)
    comp_len = np.zeros(n)
    np.add.at(comp_len, labels[graph.edges[:, 0]], graph.edge_lengths)
    drop |= comp_len[labels[graph.edges[:, 0]]] < min_component_len_px

    if remove_dead_ends:
        limit = min_component_len_px if dead_end_max_len_px is None else dead_end_max_len_px
        deg = graph.degrees
        eidx = graph.edge_index
        for seg in road_segments(graph):
            ends = deg[seg.vertex_indices[0]], deg[seg.vertex_indices[-1]]
            if sorted(ends)[0] != 1 or max(ends) < 3:
                continue
            ids = seg.vertex_indices
            keys = [eidx[(min(a, b), max(a, b))] for a, b in zip(ids[:-1], ids[1:])]
            if graph.edge_lengths[keys].sum() < limit:
                drop[keys] = True
    if not drop.any():
        return graph
    return SpatialGraph(graph.width, graph.height, graph.vertices, graph.edges[~drop])


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def graph_to_dict(graph: SpatialGraph) -> dict:
    return {
        "width": int(graph.width),
        "height": int(graph.height),
        "vertices": [[round(float(x), 6), round(float(y), 6)] for x, y in graph.vertices],
        "edges": [[int(i), int(j)] for i, j in graph.edges],
    }


def graph_to_json(graph: SpatialGraph) -> str:
    return json.dumps(graph_to_dict(graph))


def graph_from_dict(obj: dict) -> SpatialGraph:
    try:
        width, height = int(obj["width"]), int(obj["height"])
        verts, edges = obj["vertices"], obj["edges"]
    except (KeyError, TypeError) as exc:
        raise GraphValidationError(f"malformed graph object: {exc}") from exc
    g, _ = build_graph(verts, edges, width, height)
    return g


def graph_from_json(text: str) -> SpatialGraph:
    return graph_from_dict(json.loads(text))


def write_graph(path: str | os.PathLike, graph: SpatialGraph) -> None:
    with open(path, "w") as fh:
        fh.write(graph_to_json(graph))


def read_graph(path: str | os.PathLike) -> SpatialGraph:
    with open(path) as fh:
        return graph_from_json(fh.read())
