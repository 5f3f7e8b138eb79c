from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kserver.certificates import (
    DualLedger,
    certify_ratio,
    certify_run,
    check_dual_feasibility,
    check_ledger,
    check_primal_feasibility,
    dual_boundary_term,
    dual_objective,
    primal_objective,
    ratio_bound,
)
from kserver.errors import InfeasiblePrimal, ZeroDual
from kserver.fractional import init_state, serve_sequence
from kserver.hst import balanced_hst, frt_embed, random_hst, tree_metric
from kserver.metric import generate_metric
from kserver.offline import opt_min_cost_flow


def star3():
    return balanced_hst(3, 1, sigma=8, top=1.0)


def _run(tree, k, reqs, mode="exact", initial=None):
    start = init_state(tree, k, list(range(k)) if initial is None else initial, mode)
    return start, serve_sequence(start, reqs)


# primal -------------------------------------------------------------------------


def test_primal_examples():
    t = balanced_hst(2, 1, top=1.0)
    still = [np.array([0.0, 1.0])] * 3
    assert primal_objective(still, t) == 0.0
    moved = [np.array([0.0, 1.0]), np.array([1.0, 0.0])]
    assert primal_objective(moved, t) == pytest.approx(2.0)
    # only the decrease at point 1 is charged
    half = [np.array([0.0, 1.0]), np.array([0.5, 0.5])]
    assert primal_objective(half, t) == pytest.approx(1.0)


def test_primal_gate():
    t = balanced_hst(2, 1)
    with pytest.raises(InfeasiblePrimal) as err:
        primal_objective([np.array([0.0, 1.0]), np.array([0.5, 0.5])], t, requests=[1])
    assert err.value.t == 1


def test_primal_feasibility_flags():
    t = star3()
    hist = [np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, 0.5])]
    kinds = {v.constraint for v in check_primal_feasibility(hist, t, 2, [2], (0, 1))}
    assert kinds == {"covering", "service"}
    bad = [np.array([0.0, 1.0, 1.0]), np.array([1.2, -0.2, 0.0])]
    kinds = {v.constraint for v in check_primal_feasibility(bad, t, 2, [2], (0, 1))}
    assert kinds == {"initial", "bounds"}


# dual ----------------------------------------------------------------------------


def _ledger(entries, n=4, k=2, gamma=None, requests=None):
    return DualLedger(
        entries,
        np.zeros(n) if gamma is None else np.asarray(gamma, float),
        [],
        k,
        n,
        tuple(range(k)),
        requests or [],
    )


def test_dual_examples():
    assert dual_objective(_ledger([])) == 0.0
    assert dual_objective(_ledger([(1, (0, 1, 2, 3), 0.5)], requests=[3])) == pytest.approx(1.0)


def test_dual_single_serve():
    start, run = _run(star3(), 2, [2])
    ledger = DualLedger.from_run(start, run.traces)
    A = sum(da for _, _, da in ledger.entries)
    assert dual_objective(ledger) == pytest.approx(A + start.gamma[2])
    assert dual_objective(ledger) == pytest.approx(run.dual)


def test_ledger_rejects_negative_increment():
    kinds = {v.constraint for v in check_ledger(_ledger([(1, (0, 1, 2), -0.1)], requests=[2]))}
    assert "nonnegative_a" in kinds and "dual_monotone" in kinds


def test_dual_feasible_on_exact_runs():
    t = frt_embed(generate_metric("random_euclidean", 4, seed=5), 8, seed=2)
    start, run = _run(t, 3, [3, 0, 3, 1, 2, 3])
    ledger = DualLedger.from_run(start, run.traces)
    assert check_dual_feasibility(ledger.b_history, ledger, t) == []


def test_dual_bound_violation():
    t = star3()
    start, run = _run(t, 2, [2])
    ledger = DualLedger.from_run(start, run.traces)
    hist = [b.copy() for b in ledger.b_history]
    hist[1][t.leaf_node[0]] = 3 * t.D(t.leaf_node[0])
    out = check_dual_feasibility(hist, ledger, t)
    assert any(v.constraint == "b_bound" and v.where == t.leaf_node[0] for v in out)


# certificate ---------------------------------------------------------------------


def test_certify_examples():
    r = certify_ratio(0.0, 0.0, 2, 1, "exact")
    assert r.passed and r.ratio == 0.0
    r = certify_ratio(5.0, 1.0, 2, 1, "exact")
    assert r.passed and r.bound == pytest.approx(18.104, abs=1e-3)
    r = certify_ratio(20.0, 1.0, 2, 4, "weighted")
    assert not r.passed and r.bound == pytest.approx(17.578, abs=1e-3) and r.ratio == 20.0
    with pytest.raises(ZeroDual):
        certify_ratio(1.0, 0.0, 2, 1, "exact")


def test_certify_slack():
    b = ratio_bound(3, 2, "weighted")
    assert certify_ratio(b * (1 + 5e-7), 1.0, 3, 2, "weighted").passed
    assert not certify_ratio(b * (1 + 5e-6), 1.0, 3, 2, "weighted").passed


def test_h_bound_reported():
    t = random_hst(6, 3, 8.0, seed=3, ratios=[8.0, 8.0])
    start, run = _run(t, 2, [3, 4, 5, 0], mode="weighted")
    rep = certify_run(start, run.traces)
    assert rep.cert.h is not None and rep.cert.h <= t.height
    assert rep.cert.h_bound == pytest.approx(4 * rep.cert.h * math.log(3))


# weak duality --------------------------------------------------------------------


def test_dual_exceeds_opt_without_boundary_term():
    # the objective omits the final dual values, so it can top OPT
    t = star3()
    start, run = _run(t, 2, [2])
    opt = opt_min_cost_flow(tree_metric(t), [0, 1], [2]).cost
    assert opt == pytest.approx(2.0)
    assert run.dual > opt + 1.0
    assert run.dual <= opt + dual_boundary_term(t, run.final.b, 2) + 1e-9


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 4), M=st.integers(1, 8))
def test_weak_duality_with_boundary(seed, k, M):
    m = generate_metric("random_euclidean", k + 1, seed=seed)
    t = frt_embed(m, 8, seed)
    reqs = [int(p) for p in np.random.default_rng(seed).integers(0, k + 1, size=M)]
    start, run = _run(t, k, reqs)
    opt = opt_min_cost_flow(tree_metric(t), list(range(k)), reqs).cost
    slack = dual_boundary_term(t, run.final.b, k)
    assert run.dual <= (opt + slack) * (1 + 1e-6) + 1e-9
