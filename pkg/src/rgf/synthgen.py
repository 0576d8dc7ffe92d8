"""Procedural synthetic towns: perturbed-grid road graphs rendered over a
value-noise background, with disc-shaped vegetation occluding the roads.

Every random draw comes from a per-purpose stream spawned from the scene
seed (layout, occluders, texture), so e.g. raising the vegetation density
adds discs without moving the roads or the discs already placed.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .graph import SpatialGraph, build_graph, read_graph, subdivide_edges, write_graph
from .raster import rasterize, read_mask, read_pgm, write_mask, write_pgm

ROAD_SHADE = 60
BACKGROUND_RANGE = (140.0, 210.0)


@dataclass(frozen=True)
class TownParams:
    size: int = 300
    block_spacing: float = 60.0
    margin: float = 20.0
    grid_jitter: float = 6.0
    vertex_jitter: float = 0.5
    branch_probability: float = 0.5
    stub_probability: float = 0.5
    road_width_px: int = 5
    vegetation_density: float = 0.3
    radius_range: tuple[float, float] = (3.0, 8.0)
    occluder_spacing_px: float = 10.0
    occluder_shade_range: tuple[int, int] = (95, 125)
    texture_cell_px: int = 24

    def __post_init__(self):
        if self.size < 16:
            raise ValueError("size must be >= 16")
        if not 0.0 <= self.vegetation_density <= 1.0:
            raise ValueError("vegetation_density must lie in [0, 1]")
        if not 0.0 <= self.branch_probability <= 1.0 or not 0.0 <= self.stub_probability <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError("radius_range must satisfy 0 < lo <= hi")
        if self.road_width_px < 1 or self.block_spacing <= 0 or self.occluder_spacing_px <= 0:
            raise ValueError("road width, block spacing and occluder spacing must be positive")
        if 2 * self.margin >= self.size - 1:
            raise ValueError("margin too large for the image size")
        object.__setattr__(self, "radius_range", (float(lo), float(hi)))
        object.__setattr__(self, "occluder_shade_range", tuple(int(v) for v in self.occluder_shade_range))


def tiny_profile(**overrides) -> TownParams:
    """64x64 scenes with a 3x3 block grid for fast training runs."""
    base = dict(size=64, block_spacing=21.0, margin=10.0, grid_jitter=2.0, road_width_px=3,
                radius_range=(2.0, 4.0), occluder_spacing_px=8.0, texture_cell_px=12)
    base.update(overrides)
    return TownParams(**base)


@dataclass(frozen=True)
class Occluder:
    x: float
    y: float
    radius: float
    shade: int


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    seed: int
    params: TownParams
    gt_graph: SpatialGraph
    occluders: tuple[Occluder, ...]
    image: np.ndarray
    road_mask: np.ndarray
    occlusion_mask: np.ndarray

    @property
    def difficulty(self) -> float:
        return difficulty(self)


def _streams(seed: int):
    layout, occ, texture = np.random.SeedSequence(int(seed)).spawn(3)
    return np.random.default_rng(layout), np.random.default_rng(occ), np.random.default_rng(texture)


def _line_positions(params: TownParams, rng: np.random.Generator) -> np.ndarray:
    lo, hi = params.margin, params.size - 1 - params.margin
    n = max(2, int(round((hi - lo) / params.block_spacing)) + 1)
    pos = np.linspace(lo, hi, n) + rng.uniform(-params.grid_jitter, params.grid_jitter, n)
    return np.clip(pos, 1.0, params.size - 2.0)


def _layout(params: TownParams, rng: np.random.Generator) -> SpatialGraph:
    xs = _line_positions(params, rng)
    ys = _line_positions(params, rng)
    nx, ny = len(xs), len(ys)
    vid = lambda i, j: j * nx + i  # noqa: E731
    verts = np.array([(xs[i], ys[j]) for j in range(ny) for i in range(nx)], dtype=np.float64)
    verts += rng.uniform(-params.vertex_jitter, params.vertex_jitter, verts.shape)
    cand = [(vid(i, j), vid(i + 1, j)) for j in range(ny) for i in range(nx - 1)]
    cand += [(vid(i, j), vid(i, j + 1)) for j in range(ny - 1) for i in range(nx)]
    order = rng.permutation(len(cand))
    parent = list(range(nx * ny))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    edges, extra = [], []
    for k in order:
        a, b = cand[k]
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
            edges.append((a, b))
        else:
            extra.append((a, b))
    keep = rng.random(len(extra)) < params.branch_probability
    edges += [e for e, k in zip(extra, keep) if k]

    verts = verts.tolist()
    last = params.size - 1.0
    stubs = []
    for i in range(nx):
        stubs.append((vid(i, 0), (xs[i], 0.0)))
        stubs.append((vid(i, ny - 1), (xs[i], last)))
    for j in range(ny):
        stubs.append((vid(0, j), (0.0, ys[j])))
        stubs.append((vid(nx - 1, j), (last, ys[j])))
    keep = rng.random(len(stubs)) < params.stub_probability
    for (v, (sx, sy)), k in zip(stubs, keep):
        if not k:
            continue
        vx, vy = verts[v]
        # keep the stub axis-aligned with its grid vertex
        end = (vx, sy) if sy in (0.0, last) else (sx, vy)
        verts.append(end)
        edges.append((v, len(verts) - 1))
    g, dropped = build_graph(verts, edges, params.size, params.size)
    assert dropped == 0
    return g


def _place_occluders(gt: SpatialGraph, params: TownParams, rng: np.random.Generator) -> list[Occluder]:
    """Candidate discs for density 1; a scene keeps the first ``density`` share."""
    total = gt.total_length()
    n_full = int(math.ceil(total / params.occluder_spacing_px))
    lengths = gt.edge_lengths
    probs = lengths / lengths.sum()
    lo, hi = params.radius_range
    out = []
    for _ in range(n_full):
        e = rng.choice(gt.n_edges, p=probs)
        t = rng.random()
        a, b = gt.vertices[gt.edges[e, 0]], gt.vertices[gt.edges[e, 1]]
        d = (b - a) / max(np.hypot(*(b - a)), 1e-9)
        normal = np.array([-d[1], d[0]])
        r = rng.uniform(lo, hi)
        side = 1.0 if rng.random() < 0.5 else -1.0
        # discs sit on the roadside and reach partially over the carriageway
        off = side * (params.road_width_px / 2.0 + rng.uniform(-0.9 * r, 0.3 * r))
        c = a + t * (b - a) + off * normal
        shade = int(rng.integers(params.occluder_shade_range[0], params.occluder_shade_range[1] + 1))
        out.append(Occluder(float(c[0]), float(c[1]), float(r), shade))
    k = int(round(params.vegetation_density * n_full))
    return out[:k]


def disc_mask(width: int, height: int, occluders) -> tuple[np.ndarray, np.ndarray]:
    """Union of disc pixels and, per pixel, the shade of the last disc painted."""
    mask = np.zeros((height, width), dtype=bool)
    shade = np.zeros((height, width), dtype=np.int64)
    for o in occluders:
        x0, x1 = max(0, math.ceil(o.x - o.radius)), min(width - 1, math.floor(o.x + o.radius))
        y0, y1 = max(0, math.ceil(o.y - o.radius)), min(height - 1, math.floor(o.y + o.radius))
        if x0 > x1 or y0 > y1:
            continue
        yy, xx = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
        inside = (xx - o.x) ** 2 + (yy - o.y) ** 2 <= o.radius ** 2
        mask[y0 : y1 + 1, x0 : x1 + 1] |= inside
        shade[y0 : y1 + 1, x0 : x1 + 1][inside] = o.shade
    return mask, shade


def _background(params: TownParams, rng: np.random.Generator) -> np.ndarray:
    n = params.size
    cells = n // params.texture_cell_px + 2
    coarse = rng.random((cells, cells))
    u = np.arange(n) / params.texture_cell_px
    i0 = np.floor(u).astype(int)
    f = u - i0
    f = f * f * (3 - 2 * f)
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    val = rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]
    lo, hi = BACKGROUND_RANGE
    return lo + (hi - lo) * val + rng.normal(0.0, 4.0, (n, n))


def render(scene_or_parts, params: TownParams | None = None, occluders=None, texture_rng=None):
    """Return ``(image, road_mask, occlusion_mask)`` for a scene."""
    if isinstance(scene_or_parts, SyntheticScene):
        return scene_or_parts.image, scene_or_parts.road_mask, scene_or_parts.occlusion_mask
    gt = scene_or_parts
    road = rasterize(gt, params.road_width_px)
    img = _background(params, texture_rng)
    img[road] = ROAD_SHADE + texture_rng.normal(0.0, 3.0, int(road.sum()))
    img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    discs, shade = disc_mask(params.size, params.size, occluders)
    img[discs] = shade[discs].astype(np.uint8)
    return img, road, discs & road


def generate_town(seed: int, params: TownParams = TownParams()) -> SyntheticScene:
    layout_rng, occ_rng, tex_rng = _streams(seed)
    gt = _layout(params, layout_rng)
    occluders = tuple(_place_occluders(gt, params, occ_rng))
    image, road, occl = render(gt, params, occluders, tex_rng)
    for arr in (image, road, occl):
        arr.setflags(write=False)
    return SyntheticScene(int(seed), params, gt, occluders, image, road, occl)


def scene_with_occluders(scene: SyntheticScene, occluders) -> SyntheticScene:
    """Re-render ``scene`` with a hand-picked occluder list."""
    _, _, tex_rng = _streams(scene.seed)
    occluders = tuple(occluders)
    image, road, occl = render(scene.gt_graph, scene.params, occluders, tex_rng)
    return replace(scene, occluders=occluders, image=image, road_mask=road, occlusion_mask=occl)


def difficulty(scene: SyntheticScene) -> float:
    road = scene.road_mask
    n = int(road.sum())
    if n == 0:
        raise ValueError("road mask is empty")
    return float((scene.occlusion_mask & road).sum()) / n


def oracle_keypoints(scene_or_graph, max_len_px: float, n_distractors: int = 0,
                     rng: np.random.Generator | None = None, min_spacing_px: float = 2.0) -> np.ndarray:
    """Ground-truth vertices, then subdivision points, then random distractors.

    The first rows coincide with :func:`oracle_graph`'s vertices, so the gt is
    exactly representable over the returned set.
    """
    sub = oracle_graph(scene_or_graph, max_len_px)
    rng = np.random.default_rng(0) if rng is None else rng
    pts = [p for p in sub.vertices]
    w, h = sub.width, sub.height
    tries = 0
    while len(pts) < sub.n_vertices + n_distractors:
        tries += 1
        if tries > 10000 * max(n_distractors, 1):
            raise RuntimeError("could not place distractors with the requested spacing")
        p = rng.uniform([0.0, 0.0], [w - 1.0, h - 1.0])
        if np.min(np.hypot(*(np.asarray(pts) - p).T)) >= min_spacing_px:
            pts.append(p)
    return np.asarray(pts, dtype=np.float64).reshape(-1, 2)


def oracle_graph(scene_or_graph, max_len_px: float) -> SpatialGraph:
    gt = scene_or_graph.gt_graph if isinstance(scene_or_graph, SyntheticScene) else scene_or_graph
    return subdivide_edges(gt, max_len_px)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


def scene_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])


def _params_to_json(params: TownParams) -> dict:
    d = asdict(params)
    d["radius_range"] = list(d["radius_range"])
    d["occluder_shade_range"] = list(d["occluder_shade_range"])
    return d


def params_from_json(d: dict) -> TownParams:
    d = dict(d)
    d["radius_range"] = tuple(d["radius_range"])
    d["occluder_shade_range"] = tuple(d["occluder_shade_range"])
    return TownParams(**d)


def write_scene(directory: str | os.PathLike, scene: SyntheticScene, keypoints: np.ndarray | None = None,
                extra: dict | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_pgm(d / "image.pgm", scene.image)
    write_mask(d / "road_mask.pgm", scene.road_mask)
    write_mask(d / "occlusion_mask.pgm", scene.occlusion_mask)
    write_graph(d / "graph.json", scene.gt_graph)
    meta = {
        "seed": scene.seed,
        "difficulty": difficulty(scene),
        "params": _params_to_json(scene.params),
        "occluders": [asdict(o) for o in scene.occluders],
    }
    if keypoints is not None:
        meta["keypoints"] = np.round(np.asarray(keypoints, dtype=np.float64), 6).tolist()
    if extra:
        meta.update(extra)
    with open(d / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


@dataclass
class SceneRecord:
    path: Path
    image: np.ndarray
    road_mask: np.ndarray
    occlusion_mask: np.ndarray
    gt_graph: SpatialGraph
    meta: dict

    @property
    def keypoints(self) -> np.ndarray | None:
        kp = self.meta.get("keypoints")
        return None if kp is None else np.asarray(kp, dtype=np.float64).reshape(-1, 2)


def read_scene(directory: str | os.PathLike) -> SceneRecord:
    d = Path(directory)
    with open(d / "meta.json") as fh:
        meta = json.load(fh)
    return SceneRecord(d, read_pgm(d / "image.pgm"), read_mask(d / "road_mask.pgm"),
                       read_mask(d / "occlusion_mask.pgm"), read_graph(d / "graph.json"), meta)


def _dataset_candidate(seed: int, index: int, params: TownParams, max_len_px, n_distractors):
    s = scene_seed(seed, index)
    scene = generate_town(s, params)
    kp = None
    if max_len_px is not None:
        kp = oracle_keypoints(scene, max_len_px, n_distractors, np.random.default_rng(s))
    return scene, kp


def generate_dataset(out_dir: str | os.PathLike, n: int, seed: int, params: TownParams = TownParams(),
                     max_len_px: float | None = None, n_distractors: int = 0,
                     max_difficulty: float | None = None, workers: int = 1,
                     max_candidates: int | None = None) -> list[Path]:
    """Write ``n`` scenes to ``out_dir/scene_XXXX``; returns their paths.

    With ``max_difficulty`` set, seeds whose scene is harder are skipped.
    Oracle keypoints are stored in each ``meta.json`` when ``max_len_px`` is given.
    Scenes are generated in parallel chunks but accepted in seed order, so the
    output does not depend on ``workers``. At most ``max_candidates`` seeds
    (default ``100 * n``) are tried before giving up with ``RuntimeError``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []
    index = 0
    workers = max(1, int(workers))
    limit = 100 * max(n, 1) if max_candidates is None else int(max_candidates)
    with ThreadPoolExecutor(workers) as pool:
        while len(paths) < n:
            if index >= limit:
                raise RuntimeError(f"only {len(paths)} of {n} scenes met max_difficulty after {index} seeds")
            chunk = range(index, index + max(workers, n - len(paths)))
            index = chunk.stop
            jobs = pool.map(lambda i: _dataset_candidate(seed, i, params, max_len_px, n_distractors), chunk)
            for scene, kp in jobs:
                if len(paths) == n:
                    break
                if max_difficulty is not None and difficulty(scene) > max_difficulty:
                    continue
                p = out / f"scene_{len(paths):04d}"
                write_scene(p, scene, kp, {"max_len_px": max_len_px, "n_distractors": n_distractors})
                paths.append(p)
    return paths
