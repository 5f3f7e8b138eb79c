"""Fractional k-server on (weighted) sigma-HSTs via a primal-dual rate system.

Each leaf ``p`` carries ``u_p`` in ``[0, 1]``, the fraction of the leaf that
is *not* covered by servers, so ``sum_p u_p = n - k``.  Every node also
carries a dual value ``b_v`` in ``[0, 2 D(v)]`` tied to ``u_v`` through

    u_v = (NL_v / k) * (exp(b_v ln(1+k) / (2 D(v))) - 1)

where ``NL_v`` is the number of leaves below ``v`` that take part in the
current serve (all of them in exact mode, the non-full ones in weighted
mode).  Serving a request integrates the rates ``db_v / da`` in the
virtual time ``a`` until the requested leaf reaches ``u = 0``.

Exact mode uses the closed-form rates for exact sigma-HSTs with
``n = k + 1``.  Weighted mode solves the same linear system by a
bottom-up/top-down recursion that works on any tree shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.integrate import DOP853
from scipy.optimize import brentq

from .errors import (
    BadParams,
    DuplicateLeaf,
    KServerError,
    ModeError,
    RequestAlreadyServed,
    TooManyServers,
)
from .hst import HstTree, verify_hst

TAU_MASS = 1e-7
TAU_IDENTITY = 1e-7
TAU_RELATION = 1e-6
TAU_EVENT = 1e-9
RTOL = 1e-9
ATOL = 1e-11
MODES = ("exact", "weighted")


class ResidualError(KServerError, AssertionError):
    """An integration step broke node identity or the u = f(b) relation."""


# the link function --------------------------------------------------------------


def f_link(b, D, nl, k: int):
    return nl / k * np.expm1(b * math.log1p(k) / (2 * D))


def f_inverse(u, D, nl, k: int):
    """Dual value for mass ``u``, clamped to ``[0, 2D]``."""
    u = np.asarray(u, dtype=np.float64)
    nl = np.asarray(nl, dtype=np.float64)
    safe = np.where(nl > 0, nl, 1.0)
    b = 2 * D / math.log1p(k) * np.log1p(k * np.maximum(u, 0.0) / safe)
    b = np.where(nl > 0, b, 2 * D)
    return np.clip(b, 0.0, 2 * D)


def psi(j: int, sigma: float, ell: int) -> float:
    """``1 + 1/sigma + ... + 1/sigma**(ell - j)``."""
    if not 1 <= j <= ell:
        raise BadParams(f"need 1 <= j <= ell, got j={j}, ell={ell}")
    return sum(sigma ** (-i) for i in range(ell - j + 1))


def phi(j: int, sigmas: Sequence[float], ell: int) -> float:
    """``1 + 1/s_j + 1/(s_j s_{j+1}) + ...`` with ``sigmas[0] = s_1``.

    ``s_i`` is the edge ratio between depths ``i`` and ``i + 1``, so the
    sum runs over ``s_j .. s_{ell-1}``.
    """
    if not 1 <= j <= ell:
        raise BadParams(f"need 1 <= j <= ell, got j={j}, ell={ell}")
    if len(sigmas) < ell - 1:
        raise BadParams(f"need {ell - 1} per-depth ratios, got {len(sigmas)}")
    total, prod = 1.0, 1.0
    for i in range(j, ell):
        prod *= sigmas[i - 1]
        total += 1.0 / prod
    return total


# state ----------------------------------------------------------------------------


@dataclass
class FractionalState:
    """Per-node primal mass ``u`` and dual value ``b``.

    Leaves always hold their own ``u_p``.  In weighted mode an internal
    node holds the sum over its non-full leaves only.
    """

    tree: HstTree
    k: int
    mode: str
    u: np.ndarray
    b: np.ndarray
    full: np.ndarray
    gamma: np.ndarray
    initial: tuple[int, ...]
    t: int = 0

    def copy(self) -> "FractionalState":
        return FractionalState(
            self.tree,
            self.k,
            self.mode,
            self.u.copy(),
            self.b.copy(),
            self.full.copy(),
            self.gamma,
            self.initial,
            self.t,
        )

    @property
    def n(self) -> int:
        return self.tree.n

    def leaf_u(self) -> np.ndarray:
        return self.u[self.tree.leaf_node].copy()

    def server_mass(self) -> np.ndarray:
        """``x_p = 1 - u_p`` per point."""
        return 1.0 - self.leaf_u()

    def support(self) -> tuple[int, ...]:
        """Points currently not full."""
        return tuple(int(p) for p in np.flatnonzero(~self.full))

    def full_sums(self) -> np.ndarray:
        """``sum_{p in T_v} u_p`` over all leaves, full ones included."""
        return _subtree_sums(self.tree, self.u, np.ones(self.tree.n_nodes, dtype=bool))

    def nl(self) -> np.ndarray:
        return _nl_counts(self.tree, self.full)


def _levels(t: HstTree) -> list[np.ndarray]:
    cache = getattr(t, "_levels_cache", None)
    if cache is None:
        by: dict[int, list[int]] = {}
        for v in range(t.n_nodes):
            by.setdefault(t.depth[v], []).append(v)
        cache = [np.array(by.get(d, []), dtype=np.int64) for d in range(max(by) + 1)]
        t._levels_cache = cache
    return cache


def _parent_arr(t: HstTree) -> np.ndarray:
    cache = getattr(t, "_parent_cache", None)
    if cache is None:
        cache = np.array([max(p, 0) for p in t.parent], dtype=np.int64)
        t._parent_cache = cache
    return cache


def _is_leaf_arr(t: HstTree) -> np.ndarray:
    cache = getattr(t, "_leaf_cache", None)
    if cache is None:
        cache = np.array([t.is_leaf(v) for v in range(t.n_nodes)])
        t._leaf_cache = cache
    return cache


def _subtree_sums(t: HstTree, leaf_vals: np.ndarray, include: np.ndarray) -> np.ndarray:
    """Bottom-up sums of leaf values, counting only leaves with ``include``."""
    par = _parent_arr(t)
    is_leaf = _is_leaf_arr(t)
    out = np.where(is_leaf & include, leaf_vals, 0.0).astype(np.float64)
    levels = _levels(t)
    for d in range(len(levels) - 1, 0, -1):
        idx = levels[d]
        acc = np.bincount(par[idx], weights=out[idx], minlength=t.n_nodes)
        # parents at depth d-1 that are internal get the sum of their children
        pidx = levels[d - 1]
        internal = pidx[~is_leaf[pidx]]
        out[internal] = acc[internal]
    return out


def _nl_counts(t: HstTree, full: np.ndarray) -> np.ndarray:
    ones = np.zeros(t.n_nodes)
    ones[t.leaf_node] = (~full).astype(np.float64)
    return _subtree_sums(t, ones, np.ones(t.n_nodes, dtype=bool))


def _project(st: FractionalState) -> None:
    """Rebuild internal ``u`` from leaves and every ``b`` from ``u``."""
    t = st.tree
    lv = np.zeros(t.n_nodes, dtype=bool)
    lv[t.leaf_node] = True
    if st.mode == "weighted":
        include = np.ones(t.n_nodes, dtype=bool)
        include[np.array(t.leaf_node)[st.full]] = False
        nl = _nl_counts(t, st.full)
    else:
        include = np.ones(t.n_nodes, dtype=bool)
        nl = t.n_leaves.astype(np.float64)
    sums = _subtree_sums(t, st.u, include)
    st.u = np.where(lv, st.u, sums)
    st.b = f_inverse(st.u, np.maximum(t.edge_len, 1e-300), nl, st.k)
    if st.mode == "weighted":
        full_nodes = np.array(t.leaf_node)[st.full]
        st.b[full_nodes] = 2 * t.edge_len[full_nodes]
    st.b[t.root] = 0.0


def init_state(
    tree: HstTree, k: int, initial: Sequence[int], mode: str = "weighted"
) -> FractionalState:
    """Servers on ``initial``: ``u = 0`` there and ``u = 1`` elsewhere.

    Exact mode requires an exact sigma-HST with ``n = k + 1``; the
    closed-form rate constant is only valid there.
    """
    if mode not in MODES:
        raise BadParams(f"mode must be one of {MODES}")
    n = tree.n
    if not 1 <= k:
        raise BadParams("k must be >= 1")
    if k >= n:
        raise TooManyServers(f"k={k} must be smaller than n={n}")
    initial = tuple(int(p) for p in initial)
    for p in initial:
        tree.check_point(p)
    if len(set(initial)) != len(initial):
        raise DuplicateLeaf(f"initial configuration repeats a leaf: {initial}")
    if len(initial) != k:
        raise BadParams(f"initial configuration has {len(initial)} leaves, expected {k}")
    if mode == "exact":
        if n != k + 1:
            raise ModeError(f"exact mode needs n = k + 1 (n={n}, k={k})")
        if tree.weighted or verify_hst(tree, weighted=False):
            raise ModeError("exact mode needs an exact sigma-HST")
    u = np.zeros(tree.n_nodes)
    leaf_u = np.ones(n)
    leaf_u[list(initial)] = 0.0
    u[tree.leaf_node] = leaf_u
    full = leaf_u >= 1.0 if mode == "weighted" else np.zeros(n, dtype=bool)
    st = FractionalState(tree, k, mode, u, np.zeros(tree.n_nodes), full, np.zeros(n), initial)
    _project(st)
    gamma = np.zeros(n)
    for p in range(n):
        if p not in initial:
            gamma[p] = float(sum(st.b[v] for v in tree.ancestors(p)))
    st.gamma = gamma
    return st


# rate engines ----------------------------------------------------------------------


class _Ctx:
    """Per-phase constants: support, active nodes and the request path."""

    def __init__(self, st: FractionalState, p: int):
        t = st.tree
        self.tree = t
        self.k = st.k
        self.mode = st.mode
        self.n = t.n
        self.leaf = t.leaf_node[p]
        self.path = np.array(t.ancestors(p), dtype=np.int64)
        if st.mode == "weighted":
            self.nl = _nl_counts(t, st.full)
        else:
            self.nl = t.n_leaves.astype(np.float64)
        self.D = np.where(t.edge_len > 0, t.edge_len, 1.0)
        self.par = _parent_arr(t)
        self.is_leaf = _is_leaf_arr(t)
        act = self.nl > 0
        act[t.root] = False
        self.active_mask = act
        self.active = np.flatnonzero(act)
        self.levels = [lv[act[lv]] for lv in _levels(t)]
        self.nfc = {
            int(v): np.array([c for c in t.children[v] if act[c]], dtype=np.int64)
            for v in [t.root, *self.path[:-1].tolist()]
        }
        self.leaves_in_s = np.array([v for v in self.active if self.is_leaf[v]], dtype=np.int64)
        self.others = self.leaves_in_s[self.leaves_in_s != self.leaf]
        self.S = tuple(sorted(t.point[v] for v in self.leaves_in_s))
        self.lnk = math.log1p(st.k)
        self.ell = t.height
        self.sigma = t.sigma
        self.psis = [psi(j, t.sigma, self.ell) for j in range(1, self.ell + 1)] if st.mode == "exact" else []

    # weighted: general recursion
    def path_factors(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        B = u + self.nl / self.k
        D = self.D
        N = len(u)
        Phi = np.ones(N)
        K = np.zeros(N)
        for d in range(len(self.levels) - 1, 0, -1):
            idx = self.levels[d]
            if idx.size == 0:
                continue
            internal = idx[~self.is_leaf[idx]]
            Phi[internal] = 1.0 + B[internal] / (D[internal] * K[internal])
            K += np.bincount(self.par[idx], weights=B[idx] / (Phi[idx] * D[idx]), minlength=N)
        return B, Phi, K

    def weighted_rates(self, u: np.ndarray) -> np.ndarray:
        B, Phi, K = self.path_factors(u)
        D = self.D
        comp = np.zeros(len(u))
        s = 1.0
        for a in self.path:
            par = self.par[a]
            Q = K[par] - B[a] / (Phi[a] * D[a])
            x = s * D[a] * Q / B[a]
            sibs = self.nfc[int(par)]
            comp[sibs] = s / Phi[sibs]
            comp[a] = -x
            s += x * Phi[a]
        r = np.zeros(len(u))
        root = self.tree.root
        for d in range(1, len(self.levels)):
            idx = self.levels[d]
            if idx.size == 0:
                continue
            pa = self.par[idx]
            inh = np.where(pa == root, 0.0, r[pa] * (Phi[pa] - 1.0) / Phi[idx])
            r[idx] = comp[idx] + inh
        return r

    # exact: closed form
    def exact_rates(self, u: np.ndarray) -> np.ndarray:
        """Closed-form components on the request path and its siblings.

        Every node also inherits ``1/sigma`` of its parent's net rate, so
        the net rate of a node is its component plus that share.
        """
        t = self.tree
        B = u + self.nl / self.k
        F = 2.0 + 1.0 / (self.n - 1)
        comp = np.zeros(len(u))
        prev = B[t.root]
        for j, a in enumerate(self.path, start=1):
            ps = self.psis[j - 1]
            sibs = self.nfc[int(self.par[a])]
            comp[sibs] = F / (ps * prev)
            comp[a] = -F / ps * (1.0 / B[a] - 1.0 / prev)
            prev = B[a]
        r = comp.copy()
        for d in range(2, len(self.levels)):
            idx = self.levels[d]
            r[idx] = comp[idx] + r[self.par[idx]] / self.sigma
        return r

    def rates(self, u: np.ndarray) -> np.ndarray:
        return self.exact_rates(u) if self.mode == "exact" else self.weighted_rates(u)


def rate_assignment(state: FractionalState, p: int) -> np.ndarray:
    """Signed ``db_v/da`` for every node while serving point ``p``."""
    p = state.tree.check_point(p)
    leaf = state.tree.leaf_node[p]
    if state.u[leaf] <= 0.0:
        raise RequestAlreadyServed(f"point {p} is already covered")
    st = state
    if state.mode == "weighted" and state.full[p]:
        st = state.copy()
        st.full[p] = False
        _project(st)
    return _Ctx(st, p).rates(st.u)


# serving -------------------------------------------------------------------------------


@dataclass
class Phase:
    """One maximal stretch of a serve with a fixed support ``S``."""

    S: tuple[int, ...]
    delta_a: float
    db: np.ndarray
    du: np.ndarray


@dataclass
class Residuals:
    identity: float = 0.0
    relation: float = 0.0
    mass: float = 0.0
    bound: float = 0.0
    steps: int = 0

    def merge(self, other: "Residuals") -> None:
        self.identity = max(self.identity, other.identity)
        self.relation = max(self.relation, other.relation)
        self.mass = max(self.mass, other.mass)
        self.bound = max(self.bound, other.bound)
        self.steps += other.steps


@dataclass
class ServeTrace:
    request: int
    t: int
    phases: list[Phase] = field(default_factory=list)
    events: list[tuple[int, str]] = field(default_factory=list)
    primal_cost: float = 0.0
    inflow_cost: float = 0.0
    transport_cost: float = 0.0
    emd_cost: float = 0.0
    dual_profit: float = 0.0
    residuals: Residuals = field(default_factory=Residuals)
    b_before: np.ndarray | None = None
    b_after: np.ndarray | None = None
    leaf_u_before: np.ndarray | None = None
    leaf_u_after: np.ndarray | None = None

    @property
    def delta_a(self) -> float:
        return sum(ph.delta_a for ph in self.phases)


def step_costs(tree: HstTree, leaf_u_old: np.ndarray, leaf_u_new: np.ndarray) -> dict[str, float]:
    """Movement cost forms between two leaf-mass vectors.

    ``lp``: sum of 2D(v) times mass leaving ``T_v``; ``inflow``: the same
    for mass entering; ``emd``: tree transport cost sum D(v)|delta u_v|.
    """
    old = np.zeros(tree.n_nodes)
    new = np.zeros(tree.n_nodes)
    old[tree.leaf_node] = leaf_u_old
    new[tree.leaf_node] = leaf_u_new
    every = np.ones(tree.n_nodes, dtype=bool)
    delta = _subtree_sums(tree, new, every) - _subtree_sums(tree, old, every)
    D = tree.edge_len.copy()
    D[tree.root] = 0.0
    return {
        "lp": float(np.sum(2 * D * np.maximum(0.0, -delta))),
        "inflow": float(np.sum(2 * D * np.maximum(0.0, delta))),
        "emd": float(np.sum(D * np.abs(delta))),
    }


Monitor = Callable[[Residuals], None]


def _measure(ctx: _Ctx, b: np.ndarray, u: np.ndarray) -> Residuals:
    act = ctx.active
    D = ctx.D
    sums = np.bincount(ctx.par[act], weights=u[act], minlength=len(u))
    internal = act[~ctx.is_leaf[act]]
    ident = float(np.max(np.abs(u[internal] - sums[internal]), initial=0.0))
    fb = f_link(b[act], D[act], ctx.nl[act], ctx.k)
    scale = np.maximum(np.abs(u[act]), ctx.nl[act] / ctx.k)
    rel = float(np.max(np.abs(u[act] - fb) / scale, initial=0.0))
    mass = abs(float(u[ctx.leaves_in_s].sum()) - (len(ctx.leaves_in_s) - ctx.k))
    over = np.maximum(-b[act], b[act] - 2 * D[act])
    lu = u[ctx.leaves_in_s]
    bound = max(
        float(np.max(over / D[act], initial=0.0)),
        float(np.max(np.maximum(-lu, lu - 1.0), initial=0.0)),
    )
    return Residuals(ident, rel, mass, max(bound, 0.0), 1)


def _integrate_phase(
    st: FractionalState,
    ctx: _Ctx,
    trace: ServeTrace,
    check: bool,
    monitor: Monitor | None,
    h0: float | None,
) -> tuple[float, list[int], bool, float | None]:
    """Run one phase; returns (delta_a, leaves that became full, done, last h)."""
    act = ctx.active
    na = len(act)
    coef = ctx.lnk / (2 * ctx.D[act])
    nl_act = ctx.nl[act]
    k = st.k
    u_full = st.u.copy()
    pos_leaf = int(np.searchsorted(act, ctx.leaf))
    others = np.searchsorted(act, ctx.others)
    # duals live on the scale of their edge length, masses on [0, n]
    atol = np.concatenate([ATOL * ctx.D[act], np.full(na, ATOL)])

    def fun(a: float, y: np.ndarray) -> np.ndarray:
        u_full[act] = y[na:]
        r = ctx.rates(u_full)[act]
        return np.concatenate([r, coef * (y[na:] + nl_act / k) * r])

    def events_of(y: np.ndarray) -> np.ndarray:
        return np.concatenate([[y[na + pos_leaf]], 1.0 - y[na + others]])

    a = 0.0
    h = h0
    while True:
        y0 = np.concatenate([st.b[act], st.u[act]])
        solver = DOP853(fun, a, y0, t_bound=a + 1e9, rtol=RTOL, atol=atol, first_step=h)
        solver.step()
        if solver.status == "failed":
            raise KServerError(f"integrator failed at a={a}: {solver.message}")
        a_new, y = solver.t, solver.y
        h = float(solver.h_abs)
        g = events_of(y)
        crossed = np.flatnonzero(g <= 0.0)
        hit: list[int] = []
        if crossed.size:
            sol = solver.dense_output()
            roots = []
            for i in crossed:
                gi = lambda s, i=i: events_of(sol(s))[i]
                lo_val = gi(a)
                roots.append(a if lo_val <= 0.0 else brentq(gi, a, a_new, xtol=1e-15, rtol=1e-15))
            a_star = min(roots)
            y = sol(a_star)
            g = events_of(y)
            hit = [int(i) for i, r_ in zip(crossed, roots) if r_ <= a_star + TAU_EVENT]
            a_new = a_star
        res = _measure(ctx, _with(st.b, act, y[:na]), _with(st.u, act, y[na:]))
        trace.residuals.merge(res)
        if monitor is not None:
            monitor(res)
        if check and (res.identity > TAU_IDENTITY or res.relation > TAU_RELATION):
            raise ResidualError(
                f"step residuals out of tolerance: identity={res.identity:.3e} relation={res.relation:.3e}"
            )
        old_u = st.u[act].copy()
        st.u[act[ctx.is_leaf[act]]] = y[na:][ctx.is_leaf[act]]
        done = False
        full_now: list[int] = []
        for i in hit:
            if i == 0:
                st.u[ctx.leaf] = 0.0
                done = True
            else:
                leaf = int(ctx.others[i - 1])
                st.u[leaf] = 1.0
                full_now.append(st.tree.point[leaf])
        lv = ctx.leaves_in_s
        st.u[lv] = np.clip(st.u[lv], 0.0, 1.0)
        _project(st)
        trace.transport_cost += float(np.sum(2 * ctx.D[act] * np.maximum(0.0, st.u[act] - old_u)))
        a = a_new
        if done or full_now:
            return a, sorted(full_now), done, h


def _with(base: np.ndarray, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    out = base.copy()
    out[idx] = vals
    return out


def serve_request(
    state: FractionalState,
    p: int,
    *,
    check: bool = True,
    monitor: Monitor | None = None,
) -> tuple[FractionalState, ServeTrace]:
    """Serve point ``p``; returns a new state and the trace of the serve.

    With ``check`` every integration step asserts node identity and the
    u = f(b) relation before the state is re-projected.  ``monitor`` sees
    the residuals of every step.
    """
    tree = state.tree
    p = tree.check_point(p)
    st = state.copy()
    st.t += 1
    trace = ServeTrace(request=p, t=st.t)
    trace.b_before = st.b.copy()
    trace.leaf_u_before = st.leaf_u()
    leaf = tree.leaf_node[p]
    if st.u[leaf] <= 0.0:
        trace.b_after = st.b.copy()
        trace.leaf_u_after = st.leaf_u()
        return st, trace
    if st.mode == "weighted" and st.full[p]:
        st.full[p] = False
        _project(st)
    h: float | None = None
    while True:
        ctx = _Ctx(st, p)
        if len(ctx.S) <= st.k:
            # every other leaf is full, so what is left at p is drift
            if st.u[leaf] <= TAU_MASS:
                st.u[leaf] = 0.0
                _project(st)
                trace.events.append((p, "snapped"))
                break
            raise AssertionError(f"support {ctx.S} is not larger than k={st.k}")
        if ctx.others.size == 0:
            raise AssertionError("no leaf can absorb the requested mass")
        b0, u0 = st.b.copy(), st.u.copy()
        da, full_now, done, h = _integrate_phase(st, ctx, trace, check, monitor, h)
        trace.phases.append(Phase(ctx.S, da, st.b - b0, st.u - u0))
        trace.dual_profit += (len(ctx.S) - st.k) * da
        if full_now:
            for q in full_now:
                st.full[q] = True
                trace.events.append((q, "reached-1"))
            _project(st)
        if done:
            trace.events.append((p, "reached-0"))
            break
    trace.b_after = st.b.copy()
    trace.leaf_u_after = st.leaf_u()
    costs = step_costs(tree, trace.leaf_u_before, trace.leaf_u_after)
    trace.primal_cost = costs["lp"]
    trace.inflow_cost = costs["inflow"]
    trace.emd_cost = costs["emd"]
    return st, trace


class SequenceRun(NamedTuple):
    final: FractionalState
    costs: list[float]
    primal: float
    dual: float
    traces: list[ServeTrace]


def serve_sequence(
    state: FractionalState,
    requests: Sequence[int],
    *,
    check: bool = True,
    monitor: Monitor | None = None,
) -> SequenceRun:
    """Serve ``requests`` in order.

    ``dual`` includes the initial credit ``sum_{p not in I} gamma_p``.
    """
    traces = []
    st = state
    for p in requests:
        st, tr = serve_request(st, p, check=check, monitor=monitor)
        traces.append(tr)
    costs = [tr.primal_cost for tr in traces]
    dual = sum(tr.dual_profit for tr in traces) + float(state.gamma.sum())
    return SequenceRun(st, costs, float(sum(costs)), dual, traces)
