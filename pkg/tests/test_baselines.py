from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kserver.baselines import BASELINES, TreeGraph, double_coverage, greedy_nearest, work_function
from kserver.errors import NotATree, TooLarge
from kserver.hst import balanced_hst, frt_embed, reduce_depth, tree_metric
from kserver.metric import generate_metric, validate_metric
from kserver.offline import opt_min_cost_flow


@pytest.mark.parametrize("name", sorted(BASELINES))
def test_occupied_request_is_free(name):
    m = generate_metric("line", 4)
    run = BASELINES[name](m, [0, 2], [0, 2, 2])
    assert run.total == 0.0 and run.costs == [0.0] * 3


@pytest.mark.parametrize("name", sorted(BASELINES))
def test_single_server_pays_distance(name):
    m = generate_metric("random_tree", 6, seed=2)
    reqs = [3, 5, 1, 1, 4]
    run = BASELINES[name](m, [0], reqs)
    path = [0] + reqs
    assert run.total == pytest.approx(sum(m.dist[a, b] for a, b in zip(path, path[1:])))
    assert run.final == (4,)


def test_dc_on_three_leaf_star():
    # both servers walk to the hub together, then the lower index goes on
    t = balanced_hst(3, 1, top=1.0)
    run = double_coverage(t, [0, 1], [2])
    assert run.total == pytest.approx(3.0)
    assert run.final == (2, -1)


def test_dc_hst_matches_rebuilt_tree():
    t = reduce_depth(frt_embed(generate_metric("random_euclidean", 7, seed=1), 8, seed=1))
    reqs = [int(p) for p in np.random.default_rng(0).integers(0, 7, size=12)]
    a = double_coverage(t, [0, 1, 2], reqs)
    b = double_coverage(tree_metric(t), [0, 1, 2], reqs)
    assert a.total == pytest.approx(b.total)


def test_tree_reconstruction():
    m = generate_metric("random_tree", 8, seed=4)
    g = TreeGraph.from_metric(m)
    for i in range(8):
        d, _ = g.sssp(g.point_node[i])
        assert np.allclose(d[g.point_node], m.dist[i])
    # uniform metrics are stars around a hidden hub
    TreeGraph.from_metric(generate_metric("uniform", 5))
    with pytest.raises(NotATree):
        TreeGraph.from_metric(validate_metric([[0, 1, 1, 1], [1, 0, 1, 1], [1, 1, 0, 1.5], [1, 1, 1.5, 0]]))


def test_dc_not_a_tree():
    with pytest.raises(NotATree):
        double_coverage(generate_metric("random_euclidean", 5, seed=3), [0, 1], [2])


def test_wfa_zero_requests_and_guard():
    m = generate_metric("uniform", 4)
    assert work_function(m, [0, 1], []).total == 0.0
    with pytest.raises(TooLarge):
        work_function(generate_metric("uniform", 40), list(range(8)), [9])


def test_greedy_ping_pong_ratio_grows():
    m = validate_metric([[0, 1, 2, 7], [1, 0, 1, 6], [2, 1, 0, 5], [7, 6, 5, 0]])
    ratios = []
    for M in (10, 40, 160):
        reqs = [1, 2] * (M // 2)
        g = greedy_nearest(m, [0, 3], reqs).total
        ratios.append(g / opt_min_cost_flow(m, [0, 3], reqs).cost)
    assert ratios[0] < ratios[1] < ratios[2]
    assert ratios[2] > 20


def test_greedy_ties_by_index():
    m = generate_metric("line", 3)
    run = greedy_nearest(m, [0, 2], [1])
    assert run.final == (1, 2)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(3, 7), M=st.integers(1, 12), data=st.data())
def test_competitive_bounds_hold_loosely(seed, n, M, data):
    k = data.draw(st.integers(1, n - 1))
    m = generate_metric("random_tree", n, seed=seed)
    init = list(range(k))
    reqs = [int(p) for p in np.random.default_rng(seed).integers(0, n, size=M)]
    opt = opt_min_cost_flow(m, init, reqs).cost
    c = k * float(m.dist.max())
    assert work_function(m, init, reqs).total <= (2 * k - 1) * opt + c + 1e-9
    assert double_coverage(m, init, reqs).total <= k * opt + c + 1e-9
    for name in BASELINES:
        assert BASELINES[name](m, init, reqs).total >= opt - 1e-9
