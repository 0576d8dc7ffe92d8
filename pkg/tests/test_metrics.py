import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgf import metrics
from rgf.graph import build_graph
from rgf.metrics import MetricConfig

from helpers import brute_apls, brute_path_based, brute_tlts, empty_graph, grid_graph, random_graph

CFG = MetricConfig()


def G(verts, edges, size=100):
    g, _ = build_graph(verts, edges, size, size)
    return g


# --------------------------------------------------------------------------
# config and snapping
# --------------------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(weights=(0.5, 0.5, 0.5, 0.5)), dict(weights=(1.2, -0.2, 0, 0)),
                                dict(tlts_threshold=0.0), dict(n_paths=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        MetricConfig(**kw)


def test_snap_identical_graph_to_itself():
    g = grid_graph(3, 3)
    matches, _ = metrics.snap_nodes(g, g, 4.0)
    for s, p in matches:
        assert p is not None and np.allclose(p, g.vertices[s])


def test_snap_within_and_outside_buffer():
    src = G([[10, 10]], [])
    tgt = G([[0, 13], [20, 13]], [[0, 1]])
    [(_, p)] = metrics.snap_nodes(src, tgt, 4.0)[0]
    assert p == pytest.approx((10.0, 13.0))
    [(_, p)] = metrics.snap_nodes(src, tgt, 2.0)[0]
    assert p is None


def test_snap_injects_split_vertex():
    src = G([[10, 10]], [])
    tgt = G([[0, 13], [20, 13]], [[0, 1]])
    _, aug = metrics.snap_nodes(src, tgt, 4.0)
    assert aug.n_vertices == 3 and aug.n_edges == 2
    assert sorted(aug.degrees.tolist()) == [1, 1, 2]


# --------------------------------------------------------------------------
# path metrics
# --------------------------------------------------------------------------


def test_apls_identity_and_empty():
    g = grid_graph(3, 3)
    assert metrics.apls(g, g) == 1.0
    assert metrics.apls(g, empty_graph(g)) == 0.0


def test_apls_cycle_missing_edge_matches_oracle():
    sq = [[10, 10], [60, 10], [60, 60], [10, 60]]
    gt = G(sq, [[0, 1], [1, 2], [2, 3], [0, 3]])
    pred = G(sq, [[0, 1], [1, 2], [2, 3]])
    val = metrics.apls(gt, pred)
    assert val == pytest.approx(brute_apls(gt, pred), abs=1e-12)
    assert val < 1.0


def test_apls_degenerate_gt_flag():
    flags = []
    one = G([[5, 5]], [])
    assert metrics.apls(one, one, CFG, flags) == 0.0
    assert flags


def test_apls_symmetric():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b = random_graph(rng, 8), random_graph(rng, 9)
        assert metrics.apls(a, b) == pytest.approx(metrics.apls(b, a), abs=1e-15)


def test_apls_single_direction_flag():
    sq = [[10, 10], [60, 10], [60, 60], [10, 60]]
    gt = G(sq, [[0, 1], [1, 2], [2, 3], [0, 3]])
    pred = G(sq, [[0, 1], [1, 2], [2, 3]])
    one_way = metrics.apls(gt, pred, MetricConfig(symmetric_apls=False))
    assert one_way == pytest.approx(brute_apls(gt, pred, symmetric=False), abs=1e-12)


def test_tlts_identity_and_empty():
    g = grid_graph(3, 3)
    assert metrics.tlts(g, g) == (1.0, 0.0, 0.0)
    assert metrics.tlts(g, empty_graph(g)) == (0.0, 1.0, 0.0)


def test_tlts_four_percent_detour_is_correct():
    h = math.sqrt(52**2 - 50**2)
    gt = G([[0, 50], [100, 50]], [[0, 1]], 120)
    pred = G([[0, 50], [50, 50 + h], [100, 50]], [[0, 1], [1, 2]], 120)
    c, inf, bad = metrics.tlts(gt, pred)
    assert (c, inf, bad) == (1.0, 0.0, 0.0)
    err = metrics.directed_path_errors(gt, pred, CFG)
    assert err[0] == pytest.approx(0.04, abs=1e-12)
    # at a 3% threshold the same pair is too long
    assert metrics.tlts(gt, pred, MetricConfig(tlts_threshold=0.03)) == (0.0, 0.0, 1.0)


def test_path_based_spurious_component():
    gt = G([[10, 10], [40, 10], [70, 10]], [[0, 1], [1, 2]])
    pred = G([[10, 10], [40, 10], [70, 10], [10, 80], [50, 80], [90, 80]], [[0, 1], [1, 2], [3, 4], [4, 5]])
    pre, rec, f1 = metrics.path_based(gt, pred)
    assert rec == 1.0 and pre < 1.0
    assert f1 == pytest.approx(2 * pre * rec / (pre + rec))
    g = grid_graph(3, 3)
    assert metrics.path_based(g, g) == (1.0, 1.0, 1.0)
    assert metrics.path_based(g, empty_graph(g)) == (0.0, 0.0, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 12), st.integers(2, 12), st.floats(1.0, 8.0))
def test_path_metrics_match_bruteforce(seed, n1, n2, buf):
    rng = np.random.default_rng(seed)
    a = random_graph(rng, n1, 32, connected=bool(rng.random() < 0.6))
    b = random_graph(rng, n2, 32, connected=False)
    cfg = MetricConfig(buffer_px=buf)
    assert metrics.apls(a, b, cfg) == pytest.approx(brute_apls(a, b, buf), abs=1e-9)
    assert np.allclose(metrics.tlts(a, b, cfg), brute_tlts(a, b, buf), atol=1e-9)
    assert np.allclose(metrics.path_based(a, b, cfg), brute_path_based(a, b, buf), atol=1e-9)


def test_sampling_is_deterministic_and_bounded():
    g = grid_graph(6, 6)
    pairs, _ = metrics.sample_pairs(g, MetricConfig(n_paths=50))
    assert len(pairs) == 50
    h = grid_graph(6, 6)
    assert np.array_equal(pairs, metrics.sample_pairs(h, MetricConfig(n_paths=50))[0])
    other, _ = metrics.sample_pairs(h, MetricConfig(n_paths=50, rng_seed=1))
    assert not np.array_equal(pairs, other)


# --------------------------------------------------------------------------
# pixel, junction and tile metrics
# --------------------------------------------------------------------------


def test_ccq_identity_and_degenerate():
    g = grid_graph(3, 3)
    assert metrics.ccq(g, g) == (1.0, 1.0, 1.0)
    flags = []
    e = empty_graph(g)
    assert metrics.ccq(e, e, CFG, flags) == (1.0, 1.0, 1.0) and flags
    assert metrics.ccq(g, e) == (0.0, 0.0, 0.0)


def test_ccq_offset_by_slack_is_correct():
    gt = G([[5, 20], [50, 20]], [[0, 1]], 60)
    pred = G([[5, 24], [50, 24]], [[0, 1]], 60)
    corr, comp, _ = metrics.ccq(gt, pred)
    assert corr == 1.0 and comp == 1.0
    far = G([[5, 25], [50, 25]], [[0, 1]], 60)
    assert metrics.ccq(gt, far)[0] == 0.0


def test_ccq_half_coverage():
    gt = G([[5, 20], [50, 20]], [[0, 1]], 60)
    pred = G([[5, 20], [27, 20]], [[0, 1]], 60)
    corr, comp, qual = metrics.ccq(gt, pred)
    # 23 of 46 gt pixels directly covered, plus up to 4 within the slack
    assert corr == 1.0
    assert abs(comp - 0.5) <= 5 / 46
    assert qual <= min(corr, comp)


def _two_t():
    verts = [[0, 50], [30, 50], [70, 50], [99, 50], [30, 80], [70, 80], [30, 20]]
    gt = G(verts, [[0, 1], [1, 2], [2, 3], [1, 4], [2, 5]])
    return verts, gt


def test_junction_identity_missing_and_degree_mismatch():
    verts, gt = _two_t()
    assert metrics.junction_based(gt, gt) == (1.0, 1.0, 1.0)
    missing = G(verts, [[0, 1], [1, 2], [2, 3], [1, 4]])
    assert metrics.junction_based(gt, missing)[:2] == (1.0, 0.5)
    extra = G(verts, [[0, 1], [1, 2], [2, 3], [1, 4], [2, 5], [1, 6]])
    pre, rec, _ = metrics.junction_based(gt, extra)
    assert (pre, rec) == (0.5, 0.5)
    # the degree requirement can be switched off
    assert metrics.junction_based(gt, extra, MetricConfig(junction_require_degree=False))[:2] == (1.0, 1.0)


def test_junction_degenerate():
    flags = []
    path = G([[0, 0], [10, 0]], [[0, 1]])
    assert metrics.junction_based(path, path, CFG, flags) == (1.0, 1.0, 1.0) and flags


def test_subgraph_three_of_four_tiles():
    gt = G([[0, 5], [40, 5]], [[0, 1]], 80)
    pred = G([[0, 5], [30, 5]], [[0, 1]], 80)
    assert metrics.subgraph_based(gt, pred) == pytest.approx(2 * 0.75 / 1.75)
    assert metrics.subgraph_based(gt, gt) == 1.0
    assert metrics.subgraph_based(gt, empty_graph(gt)) == 0.0


def test_tile_lengths_sum_to_total_length():
    g = random_graph(np.random.default_rng(4), 15)
    assert metrics.tile_lengths(g).sum() == pytest.approx(g.total_length())


# --------------------------------------------------------------------------
# combined score and reward
# --------------------------------------------------------------------------


def test_combined_weights():
    w = metrics.PAPER_WEIGHTS
    assert sum(a * b for a, b in zip(w, (0.8, 0.6, 0.4, 1.0))) == pytest.approx(0.68)
    g = grid_graph(3, 3)
    assert metrics.combined_score(g, g) == pytest.approx(1.0)
    assert metrics.combined_score(g, empty_graph(g)) == 0.0


def test_combined_uses_component_scores():
    rng = np.random.default_rng(8)
    a, b = random_graph(rng, 10), random_graph(rng, 10)
    comps = (metrics.apls(a, b), metrics.path_based(a, b)[2], metrics.junction_based(a, b)[2],
             metrics.subgraph_based(a, b))
    assert metrics.combined_score(a, b) == pytest.approx(float(np.dot(metrics.PAPER_WEIGHTS, comps)), abs=1e-12)


def test_incremental_reward():
    gt = grid_graph(3, 3)
    part = G(gt.vertices, gt.edges[:6], gt.width)
    assert metrics.incremental_reward(gt, part, part) == 0.0
    spurious = G(gt.vertices, np.r_[gt.edges, [[0, 8]]], gt.width)
    assert metrics.incremental_reward(gt, gt, spurious) <= 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_report_invariants(seed):
    rng = np.random.default_rng(seed)
    a = random_graph(rng, int(rng.integers(2, 20)), connected=bool(rng.random() < 0.5))
    b = random_graph(rng, int(rng.integers(2, 20)), connected=False)
    rep = metrics.evaluate(a, b)
    d = rep.as_dict()
    for k in metrics.MetricReport.score_fields():
        assert 0.0 <= d[k] <= 1.0, k
    for pre, rec, f1 in ((rep.path_pre, rep.path_rec, rep.path_f1), (rep.junc_pre, rep.junc_rec, rep.junc_f1)):
        assert f1 == pytest.approx(metrics.f1_score(pre, rec))
    assert rep.ccq_quality <= min(rep.ccq_correctness, rep.ccq_completeness) + 1e-12
    assert rep.tlts_correct + rep.tlts_infeasible + rep.tlts_2l2s == pytest.approx(1.0)
    again = metrics.evaluate(a, b)
    assert again.as_dict() == d


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------


def test_stats_plus_sign():
    g = G([[50, 50], [20, 50], [80, 50], [50, 20], [50, 80]], [[0, 1], [0, 2], [0, 3], [0, 4]])
    st_ = metrics.graph_statistics(g)
    assert st_.n_intersections == 1
    assert st_.angle_histogram.sum() == st_.angle_histogram[-1] > 0
    assert st_.total_length == pytest.approx(120.0)


def test_stats_empty_graph():
    st_ = metrics.graph_statistics(G([], []))
    assert st_.angle_histogram.size == 0 and st_.degree_histogram.size == 0
    assert st_.n_intersections == 0 and st_.total_length == 0.0


def test_stats_grid_degrees():
    st_ = metrics.graph_statistics(grid_graph(3, 3))
    assert st_.degree_histogram.tolist() == [0, 0, 4, 4, 1]
    assert st_.n_intersections == 5
