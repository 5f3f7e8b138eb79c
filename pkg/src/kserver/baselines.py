"""Classical online k-server algorithms used as cost baselines."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import BadParams, DuplicateLeaf, NotATree, TooLarge
from .hst import HstTree
from .metric import FiniteMetric

TREE_TOL = 1e-9
WFA_GUARD = 10**6


@dataclass
class BaselineRun:
    algorithm: str
    costs: list[float] = field(default_factory=list)
    final: tuple[int, ...] = ()

    @property
    def total(self) -> float:
        return float(sum(self.costs))


def _check(n: int, initial: Sequence[int], requests: Sequence[int]) -> tuple[list[int], list[int]]:
    init = [int(p) for p in initial]
    reqs = [int(r) for r in requests]
    if not init:
        raise BadParams("need at least one server")
    if len(set(init)) != len(init):
        raise DuplicateLeaf(f"initial configuration repeats a point: {init}")
    for p in init + reqs:
        if not 0 <= p < n:
            raise BadParams(f"point {p} outside 0..{n - 1}")
    return init, reqs


# weighted trees ----------------------------------------------------------------------


class TreeGraph:
    """Undirected weighted tree; metric points sit on some of its vertices."""

    def __init__(self) -> None:
        self.adj: list[dict[int, float]] = []
        self.point_node: list[int] = []

    def add_node(self) -> int:
        self.adj.append({})
        return len(self.adj) - 1

    def add_edge(self, a: int, b: int, w: float) -> None:
        self.adj[a][b] = w
        self.adj[b][a] = w

    def remove_edge(self, a: int, b: int) -> None:
        del self.adj[a][b]
        del self.adj[b][a]

    @property
    def size(self) -> int:
        return len(self.adj)

    def sssp(self, src: int) -> tuple[np.ndarray, list[int]]:
        """Distances and parent pointers of the tree rooted at ``src``."""
        dist = np.full(self.size, math.inf)
        par = [-1] * self.size
        dist[src] = 0.0
        stack = [src]
        while stack:
            u = stack.pop()
            for v, w in self.adj[u].items():
                if dist[v] == math.inf:
                    dist[v] = dist[u] + w
                    par[v] = u
                    stack.append(v)
        return dist, par

    def path(self, a: int, b: int) -> list[int]:
        _, par = self.sssp(b)
        out = [a]
        while out[-1] != b:
            out.append(par[out[-1]])
        return out

    @classmethod
    def from_hst(cls, t: HstTree) -> "TreeGraph":
        g = cls()
        for _ in range(t.n_nodes):
            g.add_node()
        for v in range(t.n_nodes):
            if t.parent[v] >= 0:
                g.add_edge(v, t.parent[v], float(t.edge_len[v]))
        g.point_node = list(t.leaf_node)
        return g

    @classmethod
    def from_metric(cls, m: FiniteMetric) -> "TreeGraph":
        """Rebuild the tree realizing ``m``, or raise :class:`NotATree`.

        Points are inserted one at a time.  A new point ``x`` hangs off the
        path between the pair ``(a, b)`` minimizing its pendant length
        ``(d(a,x) + d(b,x) - d(a,b)) / 2``; the construction is then
        verified against every pairwise distance.
        """
        d = m.dist
        n = m.n
        tol = TREE_TOL * float(d.max())
        g = cls()
        g.point_node = [g.add_node() for _ in range(2)]
        g.add_edge(0, 1, float(d[0, 1]))
        for x in range(2, n):
            best = (math.inf, 0, 0)
            for a in range(x):
                for b in range(a, x):
                    h = (d[a, x] + d[b, x] - d[a, b]) / 2
                    if h < best[0] - tol:
                        best = (h, a, b)
            h, a, b = best
            h = max(h, 0.0)
            along = d[a, x] - h
            na, nb = g.point_node[a], g.point_node[b]
            path = g.path(na, nb)
            q = None
            walked = 0.0
            for u, v in zip(path, path[1:]):
                w = g.adj[u][v]
                if abs(along - walked) <= tol:
                    q = u
                    break
                if along < walked + w - tol:
                    q = g.add_node()
                    g.remove_edge(u, v)
                    g.add_edge(u, q, along - walked)
                    g.add_edge(q, v, walked + w - along)
                    break
                walked += w
            if q is None:
                q = path[-1]
            if h <= tol:
                if q in g.point_node:
                    raise NotATree(f"point {x} coincides with another point")
                g.point_node.append(q)
            else:
                nx = g.add_node()
                g.add_edge(q, nx, h)
                g.point_node.append(nx)
        for i in range(n):
            dist, _ = g.sssp(g.point_node[i])
            got = dist[g.point_node]
            err = np.abs(got - d[i])
            if err.max() > 1e-7 * float(d.max()):
                j = int(np.argmax(err))
                raise NotATree(f"no tree realizes d({i},{j})={d[i, j]:g}")
        return g


# double coverage -----------------------------------------------------------------------


@dataclass
class _Pos:
    """Server position: on the edge ``a -> b`` at distance ``off`` from ``a``."""

    a: int
    b: int
    off: float

    def at_node(self) -> bool:
        return self.off == 0.0


def _ends(g: TreeGraph, p: _Pos) -> list[tuple[int, float]]:
    if p.at_node():
        return [(p.a, 0.0)]
    return [(p.a, p.off), (p.b, g.adj[p.a][p.b] - p.off)]


def _pdist(g: TreeGraph, apsp: np.ndarray, p: _Pos, q: _Pos) -> float:
    if not p.at_node() and not q.at_node() and {p.a, p.b} == {q.a, q.b}:
        qo = q.off if q.a == p.a else g.adj[q.a][q.b] - q.off
        return abs(p.off - qo)
    return min(x + apsp[u, v] + y for u, x in _ends(g, p) for v, y in _ends(g, q))


def double_coverage(
    metric: Union[HstTree, FiniteMetric, TreeGraph],
    initial: Sequence[int],
    requests: Sequence[int],
) -> BaselineRun:
    """Double coverage on the continuous tree.

    Every server with no other server on its path to the request moves
    toward the request at unit speed; among co-located servers only the
    lowest index moves.  Motion is advanced from one tree vertex to the
    next, so every change of the moving set is hit exactly.
    """
    if isinstance(metric, HstTree):
        g = TreeGraph.from_hst(metric)
    elif isinstance(metric, FiniteMetric):
        g = TreeGraph.from_metric(metric)
    else:
        g = metric
    n = len(g.point_node)
    init, reqs = _check(n, initial, requests)
    apsp = np.array([g.sssp(v)[0] for v in range(g.size)])
    scale = float(apsp.max()) or 1.0
    tol = TREE_TOL * scale
    pos = [_Pos(g.point_node[p], g.point_node[p], 0.0) for p in init]
    run = BaselineRun("dc")
    for r in reqs:
        target = g.point_node[r]
        tpos = _Pos(target, target, 0.0)
        _, par = g.sssp(target)

        def up(ps: _Pos) -> tuple[int, float]:
            """Next vertex toward the target and the distance to it."""
            if ps.at_node():
                v = ps.a
                return (par[v], g.adj[v][par[v]]) if v != target else (v, 0.0)
            if par[ps.a] == ps.b:
                return ps.b, g.adj[ps.a][ps.b] - ps.off
            return ps.a, ps.off

        cost = 0.0
        while True:
            dr = [_pdist(g, apsp, ps, tpos) for ps in pos]
            if min(dr) <= tol:
                break
            moving = []
            for i, pi in enumerate(pos):
                blocked = False
                for j, pj in enumerate(pos):
                    if j == i:
                        continue
                    on_route = _pdist(g, apsp, pi, pj) + dr[j] <= dr[i] + tol
                    if on_route and (dr[j] < dr[i] - tol or j < i):
                        blocked = True
                        break
                if not blocked:
                    moving.append(i)
            step = min(up(pos[i])[1] for i in moving)
            for i in moving:
                v, s = up(pos[i])
                p = pos[i]
                if s - step <= tol:
                    pos[i] = _Pos(v, v, 0.0)
                elif p.at_node():
                    pos[i] = _Pos(p.a, v, step)
                elif v == p.b:
                    pos[i] = _Pos(p.a, p.b, p.off + step)
                else:
                    pos[i] = _Pos(p.a, p.b, p.off - step)
            cost += step * len(moving)
        run.costs.append(cost)
    final = []
    for ps in pos:
        node = ps.a if ps.at_node() else -1
        final.append(g.point_node.index(node) if node in g.point_node else -1)
    run.final = tuple(final)
    return run


# work function ----------------------------------------------------------------------------


def work_function(m: FiniteMetric, initial: Sequence[int], requests: Sequence[int]) -> BaselineRun:
    """Work function algorithm over k-subsets of the points."""
    init, reqs = _check(m.n, initial, requests)
    n, k, M = m.n, len(init), len(reqs)
    if math.comb(n, k) * max(M, 1) > WFA_GUARD:
        raise TooLarge(f"C({n},{k}) * {M} exceeds {WFA_GUARD}")
    d = m.dist
    configs = list(itertools.combinations(range(n), k))
    index = {c: i for i, c in enumerate(configs)}
    w = np.empty(len(configs))
    init_arr = np.array(init)
    for i, c in enumerate(configs):
        cost = d[np.ix_(init_arr, np.array(c))]
        rows, cols = linear_sum_assignment(cost)
        w[i] = cost[rows, cols].sum()

    def swap(c: tuple[int, ...], out: int, inn: int) -> tuple[int, ...]:
        return tuple(sorted([x for x in c if x != out] + [inn]))

    cur = tuple(sorted(init))
    where = {p: j for j, p in enumerate(init)}
    run = BaselineRun("wfa")
    for r in reqs:
        new = np.empty_like(w)
        for i, X in enumerate(configs):
            if r in X:
                new[i] = w[i]
            else:
                new[i] = min(w[index[swap(X, x, r)]] + d[x, r] for x in X)
        w = new
        if r in cur:
            run.costs.append(0.0)
            continue
        s = min(cur, key=lambda s: (w[index[swap(cur, s, r)]] + d[s, r], where[s]))
        run.costs.append(float(d[s, r]))
        where[r] = where.pop(s)
        cur = swap(cur, s, r)
    run.final = tuple(p for p, _ in sorted(where.items(), key=lambda kv: kv[1]))
    return run


def greedy_nearest(m: FiniteMetric, initial: Sequence[int], requests: Sequence[int]) -> BaselineRun:
    """Move the closest server; ties go to the lower server index."""
    init, reqs = _check(m.n, initial, requests)
    pos = list(init)
    run = BaselineRun("greedy")
    for r in reqs:
        if r in pos:
            run.costs.append(0.0)
            continue
        j = min(range(len(pos)), key=lambda j: (m.dist[pos[j], r], j))
        run.costs.append(float(m.dist[pos[j], r]))
        pos[j] = r
    run.final = tuple(pos)
    return run


BASELINES = {"dc": double_coverage, "wfa": work_function, "greedy": greedy_nearest}
