from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kserver.errors import BadParams, UnknownLeaf
from kserver.hst import (
    HstTree,
    balanced_hst,
    caterpillar_hst,
    frt_embed,
    leaf_distance,
    load_tree,
    random_hst,
    reduce_depth,
    save_tree,
    tree_metric,
    verify_hst,
)
from kserver.metric import KINDS, generate_metric

RHO8 = 16 / 7


def _pair_ratios(a: HstTree, b: HstTree) -> np.ndarray:
    iu = np.triu_indices(a.n, 1)
    return b.distance_matrix()[iu] / a.distance_matrix()[iu]


# leaf distances ----------------------------------------------------------------


def test_leaf_distance_examples():
    t1 = balanced_hst(3, 1, sigma=8, top=1.0)
    assert leaf_distance(t1, 0, 0) == 0.0
    assert leaf_distance(t1, 0, 2) == 2.0
    t2 = balanced_hst(2, 2, sigma=2, top=2.0)
    # leaves 0,1 share a depth-1 parent; 0 and 3 meet at the root
    assert leaf_distance(t2, 0, 3) == pytest.approx(6.0)
    assert leaf_distance(t2, 0, 1) == pytest.approx(2.0)


def test_unknown_leaf():
    t = balanced_hst(2, 1)
    with pytest.raises(UnknownLeaf):
        leaf_distance(t, 0, 5)


def test_exact_identity_on_balanced():
    # on an exact HST both legs below the lca have equal length
    t = balanced_hst(2, 3, sigma=4, top=8.0)
    for p in range(t.n):
        for q in range(t.n):
            v = t.lca(t.leaf_node[p], t.leaf_node[q])
            j = t.depth[v]
            path = t.ancestors(p)
            want = 2 * sum(t.D(a) for a in path if t.depth[a] > j)
            assert leaf_distance(t, p, q) == pytest.approx(want)


# embedding ---------------------------------------------------------------------


def test_frt_smallest():
    m = generate_metric("uniform", 2)
    t = frt_embed(m, 8, seed=0)
    assert t.n == 2
    assert leaf_distance(t, 0, 1) >= 1.0
    assert not verify_hst(t)


def test_frt_deterministic():
    m = generate_metric("random_euclidean", 12, seed=3)
    a, b = frt_embed(m, 8, seed=11), frt_embed(m, 8, seed=11)
    assert a.parent == b.parent and np.array_equal(a.edge_len, b.edge_len) and a.point == b.point


def test_frt_rejects_small_sigma():
    with pytest.raises(BadParams):
        frt_embed(generate_metric("uniform", 3), 1.0)


@settings(max_examples=40, deadline=None)
@given(
    kind=st.sampled_from(KINDS),
    n=st.integers(2, 14),
    seed=st.integers(0, 10_000),
    sigma=st.sampled_from([2.0, 4.0, 8.0]),
)
def test_frt_dominates_and_is_exact(kind, n, seed, sigma):
    m = generate_metric(kind, n, seed=seed)
    t = frt_embed(m, sigma, seed)
    assert not verify_hst(t), verify_hst(t).violations
    assert sorted(t.leaf_node) == sorted(set(t.leaf_node)) and t.n == n
    dt = t.distance_matrix()
    assert np.all(dt >= m.dist * (1 - 1e-9))


# depth reduction ---------------------------------------------------------------


def test_reduce_depth_one_is_fixed_point():
    t = balanced_hst(4, 1)
    r = reduce_depth(t)
    assert r.height == 1
    assert np.allclose(r.distance_matrix(), t.distance_matrix())


def test_reduce_balanced_8():
    t = balanced_hst(2, 3, sigma=8)
    r = reduce_depth(t)
    assert r.height <= 4
    ratios = _pair_ratios(t, r)
    assert ratios.size == 28
    assert np.all(ratios <= RHO8 + 1e-12) and np.all(1 / ratios <= RHO8 + 1e-12)


def test_reduce_caterpillar_16():
    t = caterpillar_hst(16, sigma=8)
    assert t.height == 15 and not verify_hst(t)
    r = reduce_depth(t)
    assert r.height <= 5
    assert r.report["max_distortion"] <= RHO8


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 40), depth=st.integers(1, 8), seed=st.integers(0, 10_000))
def test_reduce_bounds_random(n, depth, seed):
    t = random_hst(n, depth, 8.0, seed)
    r = reduce_depth(t)
    assert r.height <= math.ceil(math.log2(n)) + 1
    ratios = _pair_ratios(t, r)
    assert np.all(ratios <= 1 + 1e-12)  # contraction only shrinks
    assert np.all(1 / ratios <= RHO8 * (1 + 1e-9))
    # weighted stretch and equal leaf edges survive; sibling equality may not
    assert verify_hst(r).props() <= {"sibling"}
    assert sorted(r.point[v] for v in r.leaf_node) == list(range(n))


# verification ------------------------------------------------------------------


def test_verify_valid_balanced():
    assert not verify_hst(balanced_hst(3, 2))


def test_verify_unequal_siblings():
    # root -> a (2), root -> b (3); leaves under each
    t = HstTree([-1, 0, 0, 1, 2], [0, 2, 3, 0.25, 0.25], [-1, -1, -1, 0, 1], sigma=8)
    rep = verify_hst(t)
    sib = [v for v in rep.violations if v.prop == "sibling"]
    assert sib and sib[0].nodes == (0,)


def test_verify_weighted_half_sigma():
    t = random_hst(6, 3, 8.0, seed=1, ratios=[8.0, 4.0])
    rep = verify_hst(t)
    assert rep.props() == {"min_stretch"}
    assert all("depth 2" in v.detail for v in rep.violations)
    assert not verify_hst(random_hst(6, 3, 8.0, seed=1, ratios=[8.0, 16.0]))


def test_verify_exact_stretch():
    t = random_hst(6, 3, 8.0, seed=2, ratios=[8.0, 16.0])
    assert verify_hst(t, weighted=False).props() == {"stretch"}


def test_save_load_round_trip(tmp_path):
    t = reduce_depth(frt_embed(generate_metric("random_tree", 9, seed=4), 8, seed=5))
    path = tmp_path / "t.json"
    save_tree(t, str(path))
    back = load_tree(str(path))
    assert back.parent == t.parent and back.point == t.point
    assert np.array_equal(back.edge_len, t.edge_len) and back.weighted == t.weighted
    assert tree_metric(back) == tree_metric(t)
