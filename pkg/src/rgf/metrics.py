"""Graph similarity metrics used both for evaluation and as the episode reward.

All path-based scores share one primitive: for a directed comparison
``src -> tgt`` we sample vertex pairs of ``src`` with a finite, positive
shortest-path length, snap both endpoints onto ``tgt`` and record the relative
length error of the snapped path (``inf`` when infeasible). APLS, TLTS and the
path precision/recall are all read off these error vectors, so they agree on
the sampled pairs by construction.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .graph import SpatialGraph, build_graph
from .raster import rasterize

PAPER_WEIGHTS = (0.35, 0.25, 0.25, 0.15)


@dataclass(frozen=True)
class MetricConfig:
    buffer_px: float = 4.0
    n_paths: int = 200
    tlts_threshold: float = 0.05
    ccq_slack_px: float = 4.0
    weights: tuple[float, float, float, float] = PAPER_WEIGHTS
    rng_seed: int = 0
    symmetric_apls: bool = True
    junction_require_degree: bool = True
    exhaustive_max_vertices: int = 12
    tile_grid: int = 8

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        if len(w) != 4 or min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"weights must be 4 nonnegative numbers summing to 1, got {w}")
        if self.tlts_threshold <= 0:
            raise ValueError("tlts_threshold must be > 0")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        object.__setattr__(self, "weights", w)


@dataclass
class MetricReport:
    apls: float = 0.0
    tlts_correct: float = 0.0
    tlts_infeasible: float = 0.0
    tlts_2l2s: float = 0.0
    ccq_correctness: float = 0.0
    ccq_completeness: float = 0.0
    ccq_quality: float = 0.0
    path_pre: float = 0.0
    path_rec: float = 0.0
    path_f1: float = 0.0
    junc_pre: float = 0.0
    junc_rec: float = 0.0
    junc_f1: float = 0.0
    subgraph_f1: float = 0.0
    combined: float = 0.0
    flags: list[str] = field(default_factory=list)
    junction_require_degree: bool = True

    def as_dict(self) -> dict:
        d = asdict(self)
        d["flags"] = ";".join(self.flags)
        return d

    @staticmethod
    def score_fields() -> list[str]:
        return [f.name for f in fields(MetricReport) if f.type in ("float", float)]


def f1_score(pre: float, rec: float) -> float:
    return 0.0 if pre + rec == 0 else 2.0 * pre * rec / (pre + rec)


# --------------------------------------------------------------------------
# snapping
# --------------------------------------------------------------------------


def _project(points: np.ndarray, graph: SpatialGraph):
    """Nearest point on any edge for each point: (distance, edge index, t)."""
    k = len(points)
    if graph.n_edges == 0 or k == 0:
        return np.full(k, np.inf), np.full(k, -1), np.zeros(k)
    a = graph.vertices[graph.edges[:, 0]]
    b = graph.vertices[graph.edges[:, 1]]
    ab = b - a
    L2 = np.einsum("ij,ij->i", ab, ab)
    rel = points[:, None, :] - a[None, :, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.einsum("kmj,mj->km", rel, ab) / L2[None, :]
    t = np.where(L2[None, :] > 0, np.clip(t, 0.0, 1.0), 0.0)
    proj = a[None] + t[..., None] * ab[None]
    d = np.hypot(*(points[:, None, :] - proj).transpose(2, 0, 1))
    e = np.argmin(d, axis=1)
    rows = np.arange(k)
    return d[rows, e], e, t[rows, e]


def _augment(graph: SpatialGraph, edge_ids: np.ndarray, ts: np.ndarray):
    """Insert split vertices on ``graph``; returns (vertices, edges, node id per query)."""
    verts = [tuple(v) for v in graph.vertices.tolist()]
    node_of = np.empty(len(edge_ids), dtype=np.int64)
    splits: dict[int, list[tuple[float, int]]] = {}
    for q, (e, t) in enumerate(zip(edge_ids.tolist(), ts.tolist())):
        i, j = graph.edges[e]
        if t <= 1e-12:
            node_of[q] = i
        elif t >= 1.0 - 1e-12:
            node_of[q] = j
        else:
            splits.setdefault(e, []).append((t, q))
    drop = set(splits)
    edges = [tuple(x) for k, x in enumerate(graph.edges.tolist()) if k not in drop]
    for e, items in splits.items():
        i, j = graph.edges[e]
        a, b = graph.vertices[i], graph.vertices[j]
        chain = [int(i)]
        last_t = None
        for t, q in sorted(items):
            if last_t is not None and t - last_t <= 1e-12:
                node_of[q] = chain[-1]
                continue
            verts.append(tuple(a + t * (b - a)))
            node_of[q] = len(verts) - 1
            chain.append(len(verts) - 1)
            last_t = t
        chain.append(int(j))
        edges.extend(zip(chain[:-1], chain[1:]))
    return np.asarray(verts, dtype=np.float64).reshape(-1, 2), np.asarray(edges, dtype=np.int64).reshape(-1, 2), node_of


def snap_nodes(source: SpatialGraph, target: SpatialGraph, buffer_px: float):
    """Snap each source vertex onto the nearest target edge within ``buffer_px``.

    Returns ``(matches, augmented)`` where ``matches`` lists
    ``(source_index, (x, y) or None)`` and ``augmented`` is a copy of the
    target with every projected point inserted as a split vertex.
    """
    d, e, t = _project(source.vertices, target)
    ok = d <= buffer_px
    matches = []
    for s in range(source.n_vertices):
        if ok[s]:
            i, j = target.edges[e[s]]
            p = target.vertices[i] + t[s] * (target.vertices[j] - target.vertices[i])
            matches.append((s, (float(p[0]), float(p[1]))))
        else:
            matches.append((s, None))
    verts, edges, _ = _augment(target, e[ok], t[ok])
    aug, _ = build_graph(verts, edges, target.width, target.height)
    return matches, aug


# --------------------------------------------------------------------------
# path sampling
# --------------------------------------------------------------------------


def _adjacency(verts: np.ndarray, edges: np.ndarray, n: int) -> csr_matrix:
    if len(edges) == 0:
        return csr_matrix((n, n))
    d = verts[edges[:, 0]] - verts[edges[:, 1]]
    w = np.maximum(np.hypot(d[:, 0], d[:, 1]), 1e-12)
    i, j = edges[:, 0], edges[:, 1]
    return csr_matrix((np.r_[w, w], (np.r_[i, j], np.r_[j, i])), shape=(n, n))


def sample_pairs(graph: SpatialGraph, cfg: MetricConfig):
    """Vertex pairs (u < v) with finite positive path length, plus their lengths.

    Exhaustive when the graph is small or has few valid pairs, otherwise a
    seeded uniform sample of ``n_paths`` pairs without replacement.
    """
    cache = graph.__dict__.setdefault("_pair_cache", {})
    key = (cfg.n_paths, cfg.rng_seed, cfg.exhaustive_max_vertices)
    if key in cache:
        return cache[key]
    active = np.flatnonzero(graph.degrees > 0)
    if len(active) < 2:
        out = (np.zeros((0, 2), dtype=np.int64), np.zeros(0))
        cache[key] = out
        return out
    dist = dijkstra(graph.weighted_adjacency(), directed=False, indices=active)[:, active]
    iu, ju = np.triu_indices(len(active), k=1)
    p = dist[iu, ju]
    valid = np.isfinite(p) & (p > 0)
    pairs = np.stack([active[iu[valid]], active[ju[valid]]], axis=1)
    p = p[valid]
    if graph.n_vertices > cfg.exhaustive_max_vertices and len(pairs) > cfg.n_paths:
        rng = np.random.default_rng(cfg.rng_seed)
        pick = np.sort(rng.choice(len(pairs), size=cfg.n_paths, replace=False))
        pairs, p = pairs[pick], p[pick]
    cache[key] = (pairs, p)
    return pairs, p


def directed_path_errors(src: SpatialGraph, tgt: SpatialGraph, cfg: MetricConfig):
    """Relative path-length errors for sampled ``src`` pairs snapped onto ``tgt``.

    Returns ``None`` when ``src`` has no valid pair (degenerate input);
    infeasible pairs carry ``inf``.
    """
    pairs, p = sample_pairs(src, cfg)
    if len(pairs) == 0:
        return None
    err = np.full(len(pairs), np.inf)
    if tgt.n_edges == 0:
        return err
    used = np.unique(pairs)
    d, e, t = _project(src.vertices[used], tgt)
    ok = d <= cfg.buffer_px
    if not ok.any():
        return err
    verts, edges, node_of = _augment(tgt, e[ok], t[ok])
    snapped = -np.ones(src.n_vertices, dtype=np.int64)
    snapped[used[ok]] = node_of
    su, sv = snapped[pairs[:, 0]], snapped[pairs[:, 1]]
    both = (su >= 0) & (sv >= 0)
    if not both.any():
        return err
    sources = np.unique(su[both])
    row = {int(s): k for k, s in enumerate(sources)}
    dist = dijkstra(_adjacency(verts, edges, len(verts)), directed=False, indices=sources)
    pp = np.array([dist[row[int(a)], b] for a, b in zip(su[both], sv[both])])
    err[both] = np.abs(p[both] - pp) / p[both]
    return err


def _directed_apls(err) -> float:
    if err is None:
        return 0.0
    return 1.0 - float(np.mean(np.minimum(1.0, err)))


def _correct_fraction(err, thr: float) -> float:
    if err is None:
        return 0.0
    return float(np.mean(err <= thr))


def apls(gt: SpatialGraph, pred: SpatialGraph, config: MetricConfig = MetricConfig(), flags: list | None = None) -> float:
    fwd = directed_path_errors(gt, pred, config)
    if fwd is None and flags is not None:
        flags.append("apls_degenerate_gt")
    if not config.symmetric_apls:
        return _directed_apls(fwd)
    bwd = directed_path_errors(pred, gt, config)
    return 0.5 * (_directed_apls(fwd) + _directed_apls(bwd))


def tlts(gt: SpatialGraph, pred: SpatialGraph, config: MetricConfig = MetricConfig(), flags: list | None = None):
    """(correct, infeasible, too-long-or-too-short) fractions over sampled gt pairs."""
    err = directed_path_errors(gt, pred, config)
    if err is None:
        if flags is not None:
            flags.append("tlts_degenerate_gt")
        return 0.0, 1.0, 0.0
    n = len(err)
    correct = int(np.sum(err <= config.tlts_threshold))
    infeasible = int(np.sum(np.isinf(err)))
    return correct / n, infeasible / n, (n - correct - infeasible) / n


def path_based(gt: SpatialGraph, pred: SpatialGraph, config: MetricConfig = MetricConfig(), flags: list | None = None):
    fwd = directed_path_errors(gt, pred, config)
    bwd = directed_path_errors(pred, gt, config)
    if fwd is None and flags is not None:
        flags.append("path_degenerate_gt")
    rec = _correct_fraction(fwd, config.tlts_threshold)
    pre = _correct_fraction(bwd, config.tlts_threshold)
    return pre, rec, f1_score(pre, rec)


# --------------------------------------------------------------------------
# pixel / junction / tile metrics
# --------------------------------------------------------------------------


def ccq(gt: SpatialGraph, pred: SpatialGraph, config: MetricConfig = MetricConfig(), flags: list | None = None):
    """Buffer-relaxed correctness, completeness and quality on width-1 rasters.

    Quality is ``1 / (1/corr + 1/comp - 1)``, which equals
    ``TP / (|pred| + |gt| - TP)`` whenever both sides agree on the matched
    count, and never exceeds either of its inputs.
    """
    g = rasterize(gt, 1)
    p = rasterize(pred, 1)
    ng, np_ = int(g.sum()), int(p.sum())
    if ng == 0 and np_ == 0:
        if flags is not None:
            flags.append("ccq_degenerate")
        return 1.0, 1.0, 1.0
    if ng == 0 or np_ == 0:
        return 0.0, 0.0, 0.0
    from scipy.ndimage import binary_dilation

    r = int(math.floor(config.ccq_slack_px))
    se = np.ones((2 * r + 1, 2 * r + 1), dtype=bool)
    g_buf = binary_dilation(g, structure=se) if r > 0 else g
    p_buf = binary_dilation(p, structure=se) if r > 0 else p
    corr = float((p & g_buf).sum()) / np_
    comp = float((g & p_buf).sum()) / ng
    if corr == 0 or comp == 0:
        return corr, comp, 0.0
    qual = 1.0 / (1.0 / corr + 1.0 / comp - 1.0)
    return corr, comp, min(qual, corr, comp)  # guard against 1-ulp rounding


def junction_based(gt: SpatialGraph, pred: SpatialGraph, config: MetricConfig = MetricConfig(), flags: list | None = None):
    """Greedy one-to-one junction matching within ``buffer_px``."""
    gj = np.flatnonzero(gt.degrees >= 3)
    pj = np.flatnonzero(pred.degrees >= 3)
    if len(gj) == 0 and len(pj) == 0:
        if (gt.n_edges == 0) != (pred.n_edges == 0):
            return 0.0, 0.0, 0.0
        if flags is not None:
            flags.append("junction_degenerate")
        return 1.0, 1.0, 1.0
    if len(gj) == 0 or len(pj) == 0:
        return 0.0, 0.0, 0.0
    d = np.hypot(*(gt.vertices[gj][:, None, :] - pred.vertices[pj][None, :, :]).transpose(2, 0, 1))
    gi, pi = np.nonzero(d <= config.buffer_px)
    order = np.lexsort((pi, gi, d[gi, pi]))
    used_g, used_p = set(), set()
    correct = 0
    for k in order:
        a, b = int(gi[k]), int(pi[k])
        if a in used_g or b in used_p:
            continue
        used_g.add(a)
        used_p.add(b)
        if not config.junction_require_degree or gt.degrees[gj[a]] == pred.degrees[pj[b]]:
            correct += 1
    pre, rec = correct / len(pj), correct / len(gj)
    return pre, rec, f1_score(pre, rec)


def tile_lengths(graph: SpatialGraph, grid: int = 8) -> np.ndarray:
    """Total edge length inside each cell of a ``grid x grid`` partition."""
    cache = graph.__dict__.setdefault("_tile_cache", {})
    if grid in cache:
        return cache[grid]
    out = np.zeros((grid, grid))
    tw, th = graph.width / grid, graph.height / grid
    xs_lines = tw * np.arange(1, grid)
    ys_lines = th * np.arange(1, grid)
    for (i, j), L in zip(graph.edges.tolist(), graph.edge_lengths.tolist()):
        if L == 0:
            continue
        a, b = graph.vertices[i], graph.vertices[j]
        d = b - a
        ts = [0.0, 1.0]
        if d[0] != 0:
            tx = (xs_lines - a[0]) / d[0]
            ts.extend(tx[(tx > 0) & (tx < 1)].tolist())
        if d[1] != 0:
            ty = (ys_lines - a[1]) / d[1]
            ts.extend(ty[(ty > 0) & (ty < 1)].tolist())
        ts = np.unique(ts)
        mids = a + 0.5 * (ts[:-1] + ts[1:])[:, None] * d
        cx = np.clip((mids[:, 0] // tw).astype(int), 0, grid - 1)
        cy = np.clip((mids[:, 1] // th).astype(int), 0, grid - 1)
        np.add.at(out, (cy, cx), np.diff(ts) * L)
    out.setflags(write=False)
    cache[grid] = out
    return out


def subgraph_based(gt: SpatialGraph, pred: SpatialGraph, config: MetricConfig = MetricConfig(), flags: list | None = None) -> float:
    lg = tile_lengths(gt, config.tile_grid)
    lp = tile_lengths(pred, config.tile_grid)
    on_g, on_p = lg > 1e-9, lp > 1e-9
    if not on_g.any() and not on_p.any():
        if flags is not None:
            flags.append("subgraph_degenerate")
        return 1.0
    if not on_g.any() or not on_p.any():
        return 0.0
    both = on_g & on_p
    rel = np.zeros_like(lg)
    rel[both] = np.abs(lp[both] - lg[both]) / lg[both]
    tp = int(np.sum(both & (rel <= 2.0 * config.tlts_threshold)))
    pre, rec = tp / int(on_p.sum()), tp / int(on_g.sum())
    return f1_score(pre, rec)


# --------------------------------------------------------------------------
# combined score / reward
# --------------------------------------------------------------------------


def score_components(gt: SpatialGraph, pred: SpatialGraph, config: MetricConfig = MetricConfig(), flags: list | None = None):
    """(apls, path_f1, junction_f1, subgraph_f1) sharing one set of path samples."""
    fwd = directed_path_errors(gt, pred, config)
    bwd = directed_path_errors(pred, gt, config)
    if fwd is None and flags is not None:
        flags.append("apls_degenerate_gt")
    a = _directed_apls(fwd)
    if config.symmetric_apls:
        a = 0.5 * (a + _directed_apls(bwd))
    thr = config.tlts_threshold
    pf1 = f1_score(_correct_fraction(bwd, thr), _correct_fraction(fwd, thr))
    jf1 = junction_based(gt, pred, config, flags)[2]
    sf1 = subgraph_based(gt, pred, config, flags)
    return a, pf1, jf1, sf1


def combined_score(gt: SpatialGraph, pred: SpatialGraph, config: MetricConfig = MetricConfig(), flags: list | None = None) -> float:
    comps = score_components(gt, pred, config, flags)
    return float(sum(w * c for w, c in zip(config.weights, comps)))


def incremental_reward(gt: SpatialGraph, prev_pred: SpatialGraph, new_pred: SpatialGraph,
                       config: MetricConfig = MetricConfig()) -> float:
    return combined_score(gt, new_pred, config) - combined_score(gt, prev_pred, config)


def evaluate(gt: SpatialGraph, pred: SpatialGraph, config: MetricConfig = MetricConfig()) -> MetricReport:
    flags: list[str] = []
    rep = MetricReport(junction_require_degree=config.junction_require_degree)
    fwd = directed_path_errors(gt, pred, config)
    bwd = directed_path_errors(pred, gt, config)
    if fwd is None:
        flags.append("degenerate_gt_paths")
    rep.apls = _directed_apls(fwd)
    if config.symmetric_apls:
        rep.apls = 0.5 * (rep.apls + _directed_apls(bwd))
    rep.tlts_correct, rep.tlts_infeasible, rep.tlts_2l2s = tlts(gt, pred, config)
    thr = config.tlts_threshold
    rep.path_rec = _correct_fraction(fwd, thr)
    rep.path_pre = _correct_fraction(bwd, thr)
    rep.path_f1 = f1_score(rep.path_pre, rep.path_rec)
    rep.ccq_correctness, rep.ccq_completeness, rep.ccq_quality = ccq(gt, pred, config, flags)
    rep.junc_pre, rep.junc_rec, rep.junc_f1 = junction_based(gt, pred, config, flags)
    rep.subgraph_f1 = subgraph_based(gt, pred, config, flags)
    rep.combined = float(sum(w * c for w, c in zip(
        config.weights, (rep.apls, rep.path_f1, rep.junc_f1, rep.subgraph_f1))))
    rep.flags = flags
    return rep


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------


@dataclass
class GraphStatistics:
    angle_histogram: np.ndarray
    angle_bin_edges: np.ndarray
    degree_histogram: np.ndarray
    n_intersections: int
    total_length: float


def junction_angles(graph: SpatialGraph) -> np.ndarray:
    """Angles (degrees, folded into [0, 90]) between angularly adjacent
    incident edges at every junction."""
    out = []
    deg = graph.degrees
    for v in np.flatnonzero(deg >= 3):
        nb = list(graph.neighbors[v])
        d = graph.vertices[nb] - graph.vertices[v]
        ang = np.sort(np.degrees(np.arctan2(d[:, 1], d[:, 0])) % 360.0)
        gaps = np.diff(np.r_[ang, ang[0] + 360.0])
        g = np.mod(gaps, 180.0)
        out.extend(np.minimum(g, 180.0 - g).tolist())
    return np.asarray(out)


def graph_statistics(graph: SpatialGraph, n_angle_bins: int = 18) -> GraphStatistics:
    bins = np.linspace(0.0, 90.0, n_angle_bins + 1)
    ang = junction_angles(graph)
    if len(ang):
        hist, _ = np.histogram(ang, bins=bins)
    else:
        hist = np.zeros(0, dtype=np.int64)
    deg = graph.degrees
    deg_hist = np.bincount(deg) if graph.n_edges else np.zeros(0, dtype=np.int64)
    return GraphStatistics(hist, bins, deg_hist, int(np.sum(deg >= 3)), graph.total_length())
