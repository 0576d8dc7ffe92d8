"""Raster support: masks, thick-line rendering, thinning and skeleton tracing.

Masks are 2-D boolean numpy arrays indexed ``[y, x]`` (row-major, top-left
origin), which is the width x height bit layout used throughout the package.
"""

from __future__ import annotations

import os

import numpy as np
from scipy import ndimage

from .graph import SpatialGraph, build_graph, simplify_chain

_EIGHT = np.ones((3, 3), dtype=bool)


def empty_mask(width: int, height: int) -> np.ndarray:
    return np.zeros((height, width), dtype=bool)


def _round_px(v: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(v, dtype=np.float64) + 0.5).astype(np.int64)


def line_pixels(x0: int, y0: int, x1: int, y1: int) -> tuple[np.ndarray, np.ndarray, bool]:
    """Integer DDA between two pixel centers; returns xs, ys and whether x is the major axis."""
    dx, dy = x1 - x0, y1 - y0
    n = max(abs(dx), abs(dy))
    if n == 0:
        return np.array([x0]), np.array([y0]), True
    k = np.arange(n + 1)
    xs = x0 + np.floor(k * dx / n + 0.5).astype(np.int64)
    ys = y0 + np.floor(k * dy / n + 0.5).astype(np.int64)
    return xs, ys, abs(dx) >= abs(dy)


def rasterize(graph: SpatialGraph, line_width_px: int = 1) -> np.ndarray:
    """Render every edge as a thick line.

    Thickness is stamped along the minor axis of each line, so a horizontal
    edge of width 3 covers exactly three rows over its x-extent.
    """
    if line_width_px < 1:
        raise ValueError("line_width_px must be >= 1")
    w, h = int(graph.width), int(graph.height)
    mask = empty_mask(w, h)
    if graph.n_edges == 0:
        return mask
    lo = -(int(line_width_px) // 2)
    offsets = np.arange(lo, lo + int(line_width_px))
    px = _round_px(graph.vertices)
    px[:, 0] = np.clip(px[:, 0], 0, w - 1)
    px[:, 1] = np.clip(px[:, 1], 0, h - 1)
    for i, j in graph.edges.tolist():
        xs, ys, x_major = line_pixels(px[i, 0], px[i, 1], px[j, 0], px[j, 1])
        if x_major:
            X = np.repeat(xs, len(offsets))
            Y = (ys[:, None] + offsets[None, :]).ravel()
        else:
            X = (xs[:, None] + offsets[None, :]).ravel()
            Y = np.repeat(ys, len(offsets))
        ok = (X >= 0) & (X < w) & (Y >= 0) & (Y < h)
        mask[Y[ok], X[ok]] = True
    return mask


# --------------------------------------------------------------------------
# thinning
# --------------------------------------------------------------------------

# ring order P2..P9: N, NE, E, SE, S, SW, W, NW as (dy, dx)
_RING = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def _ring_stack(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1)
    h, w = img.shape
    return np.stack([p[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w] for dy, dx in _RING]).astype(np.int8)


def _zs_conditions(P: np.ndarray, first: bool) -> np.ndarray:
    B = P.sum(axis=0)
    A = ((P == 0) & (np.roll(P, -1, axis=0) == 1)).sum(axis=0)
    P2, P4, P6, P8 = P[0], P[2], P[4], P[6]
    if first:
        c = (P2 * P4 * P6 == 0) & (P4 * P6 * P8 == 0)
    else:
        c = (P2 * P4 * P8 == 0) & (P2 * P6 * P8 == 0)
    return (B >= 2) & (B <= 6) & (A == 1) & c


def _ring_at(img: np.ndarray, y: int, x: int) -> list[int]:
    h, w = img.shape
    out = []
    for dy, dx in _RING:
        yy, xx = y + dy, x + dx
        out.append(int(img[yy, xx]) if 0 <= yy < h and 0 <= xx < w else 0)
    return out


def _zs_ok_single(ring: list[int], first: bool) -> bool:
    B = sum(ring)
    A = sum(1 for k in range(8) if ring[k] == 0 and ring[(k + 1) % 8] == 1)
    P2, P4, P6, P8 = ring[0], ring[2], ring[4], ring[6]
    if first:
        c = P2 * P4 * P6 == 0 and P4 * P6 * P8 == 0
    else:
        c = P2 * P4 * P8 == 0 and P2 * P6 * P8 == 0
    return 2 <= B <= 6 and A == 1 and c


def _topology_kept(before_labels: np.ndarray, n_before: int, after: np.ndarray) -> bool:
    _, n_after = ndimage.label(after, structure=_EIGHT)
    if n_after != n_before:
        return False
    survivors = np.unique(before_labels[after])
    return len(survivors) == n_before


def _simple_lut() -> np.ndarray:
    """Lookup of (8,4)-simple pixels that sit on a staircase corner."""
    lut = np.zeros(256, dtype=bool)
    for code in range(256):
        ring = [(code >> k) & 1 for k in range(8)]
        fg = [_RING[k] for k in range(8) if ring[k]]
        if len(fg) < 2:
            continue
        # 8-components of the foreground neighbours
        comps = 0
        seen: set = set()
        for s in fg:
            if s in seen:
                continue
            comps += 1
            stack = [s]
            seen.add(s)
            while stack:
                a = stack.pop()
                for b in fg:
                    if b not in seen and max(abs(a[0] - b[0]), abs(a[1] - b[1])) == 1:
                        seen.add(b)
                        stack.append(b)
        if comps != 1:
            continue
        # 4-components of background neighbours that touch the center 4-wise
        bg = [_RING[k] for k in range(8) if not ring[k]]
        seen = set()
        touching = 0
        for s in bg:
            if s in seen:
                continue
            comp = [s]
            seen.add(s)
            stack = [s]
            while stack:
                a = stack.pop()
                for b in bg:
                    if b not in seen and abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1:
                        seen.add(b)
                        stack.append(b)
                        comp.append(b)
            if any(abs(dy) + abs(dx) == 1 for dy, dx in comp):
                touching += 1
        if touching != 1:
            continue
        n, e, s_, w = ring[0], ring[2], ring[4], ring[6]
        if (n and e) or (e and s_) or (s_ and w) or (w and n):
            lut[code] = True
    return lut


_STAIR_LUT = _simple_lut()


def _remove_staircases(img: np.ndarray) -> np.ndarray:
    weights = (1 << np.arange(8)).astype(np.int64)
    changed = True
    while changed:
        changed = False
        P = _ring_stack(img)
        codes = np.tensordot(weights, P.astype(np.int64), axes=1)
        cand = img & _STAIR_LUT[codes]
        for y, x in np.argwhere(cand):
            ring = _ring_at(img, int(y), int(x))
            code = sum(b << k for k, b in enumerate(ring))
            if _STAIR_LUT[code]:
                img[y, x] = False
                changed = True
    return img


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Zhang-Suen thinning followed by staircase cleanup.

    Each parallel sub-iteration is checked against the 8-connected component
    labelling; if it would delete or split a component (the classic 2x2
    block case) that sub-iteration is redone sequentially with the same
    deletion rule re-evaluated pixel by pixel, which cannot change topology.
    """
    img = np.asarray(mask, dtype=bool).copy()
    if not img.any():
        return img
    labels, n_comp = ndimage.label(img, structure=_EIGHT)
    while True:
        changed = False
        for first in (True, False):
            cand = img & _zs_conditions(_ring_stack(img), first)
            if not cand.any():
                continue
            trial = img & ~cand
            if _topology_kept(labels, n_comp, trial):
                img = trial
                changed = True
                continue
            for y, x in np.argwhere(cand):
                if _zs_ok_single(_ring_at(img, int(y), int(x)), first):
                    img[y, x] = False
                    changed = True
        if not changed:
            break
    return _remove_staircases(img)


# --------------------------------------------------------------------------
# skeleton -> graph
# --------------------------------------------------------------------------


def _pixel_degree(img: np.ndarray) -> np.ndarray:
    return _ring_stack(img).sum(axis=0) * img


def mask_to_graph(skeleton: np.ndarray, sample_tol_px: float = 0.75) -> SpatialGraph:
    """Trace a 1-pixel skeleton into a spatial graph.

    Pixels whose 8-neighbour count differs from 2 are grouped into node
    clusters (one vertex each, at the cluster centroid); chains of degree-2
    pixels between clusters become polylines, sampled down to the
    intermediate vertices needed to stay within ``sample_tol_px``.
    """
    img = np.asarray(skeleton, dtype=bool)
    h, w = img.shape
    deg = _pixel_degree(img)
    node_mask = img & (deg != 2)
    node_labels, n_nodes = ndimage.label(node_mask, structure=_EIGHT)

    vertices: list[tuple[float, float]] = []
    for lab in range(1, n_nodes + 1):
        ys, xs = np.nonzero(node_labels == lab)
        vertices.append((float(xs.mean()), float(ys.mean())))

    edges: list[tuple[int, int]] = []
    taken: set[tuple[int, int]] = set()
    visited = np.zeros_like(img)

    def nbrs(y, x):
        for dy, dx in _RING:
            yy, xx = y + dy, x + dx
            if 0 <= yy < h and 0 <= xx < w and img[yy, xx]:
                yield yy, xx

    def emit(chain_pts: list[tuple[float, float]], ids_ends: tuple[int, int]):
        pts = np.asarray(chain_pts, dtype=np.float64)
        closed = ids_ends[0] == ids_ends[1]
        if closed and len(pts) < 4:
            return
        # interior ids are placeholders unique to this chain
        ids = [ids_ends[0]] + [-(k + 1) for k in range(len(pts) - 2)] + [ids_ends[1]]
        keep = simplify_chain(pts, sample_tol_px, closed=closed, taken=taken, ids=ids)
        chosen = []
        for k in keep:
            if k == 0:
                chosen.append(ids_ends[0])
            elif k == len(pts) - 1:
                chosen.append(ids_ends[1])
            else:
                vertices.append((float(pts[k, 0]), float(pts[k, 1])))
                chosen.append(len(vertices) - 1)
        for a, b in zip(chosen[:-1], chosen[1:]):
            key = (min(a, b), max(a, b))
            taken.add(key)
            edges.append(key)

    # chains leaving node clusters
    for y0, x0 in np.argwhere(node_mask):
        start = node_labels[y0, x0] - 1
        for y1, x1 in nbrs(y0, x0):
            if node_mask[y1, x1] or visited[y1, x1]:
                continue
            pts = [vertices[start], (float(x1), float(y1))]
            visited[y1, x1] = True
            prev, cur = (y0, x0), (y1, x1)
            end = None
            while end is None:
                nxt = None
                for cand in nbrs(*cur):
                    if cand == prev:
                        continue
                    if node_mask[cand]:
                        end = node_labels[cand] - 1
                        break
                    if not visited[cand]:
                        nxt = cand
                        break
                if end is not None:
                    break
                if nxt is None:
                    break
                visited[nxt] = True
                pts.append((float(nxt[1]), float(nxt[0])))
                prev, cur = cur, nxt
            if end is None:
                continue
            pts.append(vertices[end])
            emit(pts, (start, end))

    # closed loops without any node pixel
    for y0, x0 in np.argwhere(img & ~visited & ~node_mask):
        if visited[y0, x0]:
            continue
        vertices.append((float(x0), float(y0)))
        anchor = len(vertices) - 1
        visited[y0, x0] = True
        pts = [(float(x0), float(y0))]
        prev, cur = None, (int(y0), int(x0))
        while True:
            nxt = None
            for cand in nbrs(*cur):
                if cand != prev and not visited[cand]:
                    nxt = cand
                    break
            if nxt is None:
                break
            visited[nxt] = True
            pts.append((float(nxt[1]), float(nxt[0])))
            prev, cur = cur, nxt
        pts.append((float(x0), float(y0)))
        emit(pts, (anchor, anchor))

    g, _ = build_graph(vertices, edges, w, h)
    return g


# --------------------------------------------------------------------------
# PGM (P5) io
# --------------------------------------------------------------------------


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    arr = np.clip(arr, 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pos += 1
    arr = np.frombuffer(data[pos : pos + w * h], dtype=np.uint8)
    if arr.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return arr.reshape(h, w).copy()


def write_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    write_pgm(path, np.asarray(mask, dtype=bool))


def read_mask(path: str | os.PathLike, threshold: int = 128) -> np.ndarray:
    return read_pgm(path) >= threshold
