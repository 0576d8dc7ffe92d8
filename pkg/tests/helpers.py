"""Shared fixtures and independent reference implementations for the tests.

The oracles here deliberately avoid the package's own code paths: plain
Python loops, heapq Dijkstra, per-pixel thinning.
"""

from __future__ import annotations

import heapq
import math

import numpy as np

from rgf.graph import SpatialGraph, build_graph
from rgf.pipeline import make_tile_plan


# --------------------------------------------------------------------------
# random graphs
# --------------------------------------------------------------------------


def random_graph(rng: np.random.Generator, n: int, size: int = 64, extra: float = 0.3,
                 connected: bool = True, integer: bool = False) -> SpatialGraph:
    """Random planar-ish graph: a random spanning tree plus a few extra edges."""
    pts = rng.uniform(1, size - 1, size=(n, 2))
    if integer:
        pts = np.round(pts)
    edges = set()
    order = rng.permutation(n)
    for k in range(1, n):
        if connected or rng.random() < 0.7:
            a, b = int(order[k]), int(order[rng.integers(k)])
            edges.add((min(a, b), max(a, b)))
    for _ in range(int(extra * n)):
        a, b = rng.integers(n, size=2)
        if a != b:
            edges.add((int(min(a, b)), int(max(a, b))))
    g, _ = build_graph(pts, sorted(edges), size, size)
    return g


def grid_graph(nx: int, ny: int, spacing: float = 10.0, origin: float = 5.0) -> SpatialGraph:
    verts, edges = [], []
    for j in range(ny):
        for i in range(nx):
            verts.append((origin + i * spacing, origin + j * spacing))
            k = j * nx + i
            if i + 1 < nx:
                edges.append((k, k + 1))
            if j + 1 < ny:
                edges.append((k, k + nx))
    size = int(math.ceil(origin * 2 + spacing * (max(nx, ny) - 1)))
    g, _ = build_graph(verts, edges, size, size)
    return g


def empty_graph(g: SpatialGraph) -> SpatialGraph:
    return SpatialGraph(g.width, g.height, np.zeros((0, 2)), np.zeros((0, 2), dtype=np.int64))


# --------------------------------------------------------------------------
# shortest-path oracle for APLS / TLTS / path metrics
# --------------------------------------------------------------------------


def dijkstra_all(n: int, adj: dict[int, list[tuple[int, float]]], src: int) -> list[float]:
    dist = [math.inf] * n
    dist[src] = 0.0
    heap = [(0.0, src)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, w in adj.get(u, []):
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def _adj_lists(verts, edges):
    adj: dict[int, list[tuple[int, float]]] = {}
    for a, b in edges:
        w = max(math.dist(verts[a], verts[b]), 1e-12)
        adj.setdefault(a, []).append((b, w))
        adj.setdefault(b, []).append((a, w))
    return adj


def _nearest_on_edges(p, verts, edges):
    """Loop over edges, keeping the first strictly-closest projection."""
    best = (math.inf, -1, 0.0)
    for k, (a, b) in enumerate(edges):
        ax, ay = verts[a]
        bx, by = verts[b]
        dx, dy = bx - ax, by - ay
        L2 = dx * dx + dy * dy
        t = 0.0 if L2 == 0 else min(1.0, max(0.0, ((p[0] - ax) * dx + (p[1] - ay) * dy) / L2))
        d = math.hypot(p[0] - (ax + t * dx), p[1] - (ay + t * dy))
        if d < best[0]:
            best = (d, k, t)
    return best


def brute_path_errors(src: SpatialGraph, tgt: SpatialGraph, buffer_px: float):
    """Relative path-length error for every valid ``src`` pair, or None."""
    sv = [tuple(v) for v in src.vertices.tolist()]
    se = [tuple(e) for e in src.edges.tolist()]
    deg = [0] * len(sv)
    for a, b in se:
        deg[a] += 1
        deg[b] += 1
    sadj = _adj_lists(sv, se)
    active = [i for i in range(len(sv)) if deg[i] > 0]
    pairs = []
    for ii, u in enumerate(active):
        du = dijkstra_all(len(sv), sadj, u)
        for v in active[ii + 1:]:
            if math.isfinite(du[v]) and du[v] > 0:
                pairs.append((u, v, du[v]))
    if not pairs:
        return None
    tv = [tuple(v) for v in tgt.vertices.tolist()]
    te = [tuple(e) for e in tgt.edges.tolist()]
    # snap each used source vertex and splice it into the target as a new node
    snapped: dict[int, int] = {}
    splits: dict[int, list[tuple[float, int]]] = {}
    verts = list(tv)
    for u in sorted({x for p in pairs for x in p[:2]}):
        d, k, t = _nearest_on_edges(sv[u], tv, te)
        if k < 0 or d > buffer_px:
            continue
        a, b = te[k]
        verts.append((tv[a][0] + t * (tv[b][0] - tv[a][0]), tv[a][1] + t * (tv[b][1] - tv[a][1])))
        snapped[u] = len(verts) - 1
        splits.setdefault(k, []).append((t, len(verts) - 1))
    edges = []
    for k, (a, b) in enumerate(te):
        if k not in splits:
            edges.append((a, b))
            continue
        chain = [a] + [node for _, node in sorted(splits[k])] + [b]
        edges.extend(zip(chain[:-1], chain[1:]))
    adj = _adj_lists(verts, edges)
    out = []
    for u, v, p in pairs:
        if u not in snapped or v not in snapped:
            out.append(math.inf)
            continue
        q = dijkstra_all(len(verts), adj, snapped[u])[snapped[v]]
        out.append(abs(p - q) / p if math.isfinite(q) else math.inf)
    return out


def brute_apls(gt, pred, buffer_px=4.0, symmetric=True):
    def directed(err):
        return 0.0 if err is None else 1.0 - sum(min(1.0, e) for e in err) / len(err)

    fwd = directed(brute_path_errors(gt, pred, buffer_px))
    if not symmetric:
        return fwd
    return 0.5 * (fwd + directed(brute_path_errors(pred, gt, buffer_px)))


def brute_tlts(gt, pred, buffer_px=4.0, thr=0.05):
    err = brute_path_errors(gt, pred, buffer_px)
    if err is None:
        return 0.0, 1.0, 0.0
    n = len(err)
    c = sum(e <= thr for e in err)
    inf = sum(math.isinf(e) for e in err)
    return c / n, inf / n, (n - c - inf) / n


def brute_path_based(gt, pred, buffer_px=4.0, thr=0.05):
    def frac(err):
        return 0.0 if err is None else sum(e <= thr for e in err) / len(err)

    rec = frac(brute_path_errors(gt, pred, buffer_px))
    pre = frac(brute_path_errors(pred, gt, buffer_px))
    f1 = 0.0 if pre + rec == 0 else 2 * pre * rec / (pre + rec)
    return pre, rec, f1


# --------------------------------------------------------------------------
# thinning oracle
# --------------------------------------------------------------------------


def zhang_suen_reference(mask: np.ndarray) -> np.ndarray:
    """Textbook Zhang-Suen thinning with per-pixel Python loops."""
    img = np.pad(np.asarray(mask, dtype=np.uint8), 1)
    H, W = img.shape
    changed = True
    while changed:
        changed = False
        for step in (0, 1):
            kill = []
            for y in range(1, H - 1):
                for x in range(1, W - 1):
                    if not img[y, x]:
                        continue
                    p = [img[y - 1, x], img[y - 1, x + 1], img[y, x + 1], img[y + 1, x + 1],
                         img[y + 1, x], img[y + 1, x - 1], img[y, x - 1], img[y - 1, x - 1]]
                    b = sum(p)
                    a = sum(p[k] == 0 and p[(k + 1) % 8] == 1 for k in range(8))
                    if not (2 <= b <= 6 and a == 1):
                        continue
                    p2, p4, p6, p8 = p[0], p[2], p[4], p[6]
                    if step == 0 and p2 * p4 * p6 == 0 and p4 * p6 * p8 == 0:
                        kill.append((y, x))
                    if step == 1 and p2 * p4 * p8 == 0 and p2 * p6 * p8 == 0:
                        kill.append((y, x))
            for y, x in kill:
                img[y, x] = 0
            changed |= bool(kill)
    return img[1:-1, 1:-1].astype(bool)


def count_components8(mask: np.ndarray) -> int:
    """Flood-fill component count (8-connectivity)."""
    m = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(m)
    H, W = m.shape
    n = 0
    for y in range(H):
        for x in range(W):
            if m[y, x] and not seen[y, x]:
                n += 1
                stack = [(y, x)]
                seen[y, x] = True
                while stack:
                    cy, cx = stack.pop()
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            yy, xx = cy + dy, cx + dx
                            if 0 <= yy < H and 0 <= xx < W and m[yy, xx] and not seen[yy, xx]:
                                seen[yy, xx] = True
                                stack.append((yy, xx))
    return n


# --------------------------------------------------------------------------
# small scenes
# --------------------------------------------------------------------------


def square_scene(side: float = 30.0, size: int = 64):
    """Four keypoints at the corners of a square whose gt is the 4-cycle."""
    o = (size - side) / 2
    kp = np.array([[o, o], [o + side, o], [o + side, o + side], [o, o + side]])
    gt, _ = build_graph(kp, [(0, 1), (1, 2), (2, 3), (0, 3)], size, size)
    image = np.zeros((size, size), dtype=np.uint8)
    return image, kp, gt


def chain_agent(image, kp, init):
    """Connects keypoints consecutively by x: a road that runs left to right."""
    edges = {(min(a, b), max(a, b)) for a, b in init}
    order = np.argsort(kp[:, 0], kind="stable")
    for a, b in zip(order[:-1], order[1:]):
        edges.add((int(min(a, b)), int(max(a, b))))
    return edges


def two_patch_road():
    """A 100x40 horizontal road split into two 60 px patches overlapping by 20;
    the second patch sees the shared keypoints shifted by under a pixel."""
    W, H = 100, 40
    image = np.zeros((H, W), np.uint8)
    image[19:22, :] = 255
    plan = make_tile_plan(W, H, 60, 20)

    def keypoints(k, origin, patch):
        xs = {0: [0, 15, 30, 45, 59], 1: [45.8, 59.5, 70, 85, 99]}[k]
        return np.array([[x - origin[0], 20.0 + (0.6 if k else 0.0)] for x in xs])

    return image, plan, keypoints
