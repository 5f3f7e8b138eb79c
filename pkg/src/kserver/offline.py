"""Exact offline optimum for integral k-server.

Two independent solvers: a dynamic program over configurations and a
min-cost flow on a time-expanded network.  Both restrict to lazy
schedules (a server moves only to serve a request), which loses nothing.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BadParams, DuplicateLeaf, TooLarge
from .metric import FiniteMetric

DP_GUARD = 10**6
FLOW_GUARD = 10**4


@dataclass
class OfflineSolution:
    cost: float
    schedule: list[tuple[int, int, int]] = field(default_factory=list)

    def replay_cost(self, m: FiniteMetric) -> float:
        return float(sum(m.dist[a, b] for _, a, b in self.schedule))


def _check(m: FiniteMetric, initial: Sequence[int], requests: Sequence[int]) -> tuple[list[int], list[int]]:
    init = [int(p) for p in initial]
    reqs = [int(r) for r in requests]
    if not init:
        raise BadParams("need at least one server")
    if len(set(init)) != len(init):
        raise DuplicateLeaf(f"initial configuration repeats a point: {init}")
    for p in init + reqs:
        if not 0 <= p < m.n:
            raise BadParams(f"point {p} outside 0..{m.n - 1}")
    if len(init) > m.n:
        raise BadParams("more servers than points")
    return init, reqs


def _schedule_from_configs(
    init: list[int], moves: list[tuple[int, int]], reqs: list[int]
) -> list[tuple[int, int, int]]:
    """Turn (from, to) moves into (server index, from, to) rows."""
    pos = list(init)
    out = []
    for (a, b), r in zip(moves, reqs):
        if a == b:
            j = pos.index(r)
        else:
            j = pos.index(a)
            pos[j] = b
        out.append((j, a, b))
    return out


def opt_brute_force(m: FiniteMetric, initial: Sequence[int], requests: Sequence[int]) -> OfflineSolution:
    """Configuration DP; ties resolve to the lexicographically smallest predecessor."""
    init, reqs = _check(m, initial, requests)
    k, M = len(init), len(reqs)
    if math.comb(m.n, k) * max(M, 1) > DP_GUARD:
        raise TooLarge(f"C({m.n},{k}) * {M} exceeds {DP_GUARD}")
    d = m.dist
    start = tuple(sorted(init))
    layer: dict[tuple[int, ...], float] = {start: 0.0}
    back: list[dict[tuple[int, ...], tuple[tuple[int, ...], int]]] = []
    for r in reqs:
        nxt: dict[tuple[int, ...], float] = {}
        ptr: dict[tuple[int, ...], tuple[tuple[int, ...], int]] = {}
        for C in sorted(layer):
            c = layer[C]
            if r in C:
                cands = [(C, c, r)]
            else:
                cands = [
                    (tuple(sorted([x for x in C if x != s] + [r])), c + float(d[s, r]), s)
                    for s in C
                ]
            for Y, cost, s in cands:
                if Y not in nxt or cost < nxt[Y] - 1e-12:
                    nxt[Y] = cost
                    ptr[Y] = (C, s)
        layer = nxt
        back.append(ptr)
    best = min(sorted(layer), key=lambda C: layer[C])
    moves: list[tuple[int, int]] = []
    C = best
    for t in range(M - 1, -1, -1):
        prev, s = back[t][C]
        moves.append((s, reqs[t]))
        C = prev
    moves.reverse()
    sched = _schedule_from_configs(init, moves, reqs)
    return OfflineSolution(float(layer[best]), sched)


# min-cost flow -------------------------------------------------------------------------


class _Graph:
    """Residual graph with lexicographic (count, length) arc costs."""

    def __init__(self, n: int):
        self.head: list[list[int]] = [[] for _ in range(n)]
        self.to: list[int] = []
        self.cap: list[int] = []
        self.c1: list[int] = []
        self.c2: list[float] = []

    def add(self, u: int, v: int, cap: int, c1: int, c2: float) -> int:
        e = len(self.to)
        for a, b, cp, x, y in ((u, v, cap, c1, c2), (v, u, 0, -c1, -c2)):
            self.head[a].append(len(self.to))
            self.to.append(b)
            self.cap.append(cp)
            self.c1.append(x)
            self.c2.append(y)
        return e


def opt_min_cost_flow(m: FiniteMetric, initial: Sequence[int], requests: Sequence[int]) -> OfflineSolution:
    """Successive shortest paths on a time-expanded network.

    Node ``W(p, i)`` is "a server waits at ``p`` after request ``i``".  Each
    request ``i`` has a unit arc ``R_in(i) -> R_out(i)`` of cost ``(-1, 0)``;
    a server at ``p`` reaches it through ``W(p, i-1) -> R_in(i)`` at cost
    ``(0, d(p, r_i))`` and continues at ``W(r_i, i)``.  Minimizing the
    lexicographic cost first maximizes coverage (always ``M``), then
    distance, without a big-M constant.
    """
    init, reqs = _check(m, initial, requests)
    k, M, n = len(init), len(reqs), m.n
    if M > FLOW_GUARD:
        raise TooLarge(f"{M} requests exceed {FLOW_GUARD}")
    if M == 0:
        return OfflineSolution(0.0, [])
    d = m.dist

    # node order S, W(*,0), Rin(1), Rout(1), W(*,1), ..., T is topological
    ids: dict[tuple, int] = {}
    order: list[tuple] = [("S",)]
    for p in range(n):
        order.append(("W", p, 0))
    for i in range(1, M + 1):
        order.append(("Rin", i))
        order.append(("Rout", i))
        for p in range(n):
            order.append(("W", p, i))
    order.append(("T",))
    for idx, key in enumerate(order):
        ids[key] = idx
    N = len(order)
    g = _Graph(N)
    src_edges = []
    for j, p in enumerate(init):
        src_edges.append(g.add(ids[("S",)], ids[("W", p, 0)], 1, 0, 0.0))
    for i in range(1, M + 1):
        r = reqs[i - 1]
        g.add(ids[("Rin", i)], ids[("Rout", i)], 1, -1, 0.0)
        g.add(ids[("Rout", i)], ids[("W", r, i)], 1, 0, 0.0)
        for p in range(n):
            g.add(ids[("W", p, i - 1)], ids[("W", p, i)], k, 0, 0.0)
            g.add(ids[("W", p, i - 1)], ids[("Rin", i)], 1, 0, float(d[p, r]))
    for p in range(n):
        g.add(ids[("W", p, M)], ids[("T",)], k, 0, 0.0)
    S, T = ids[("S",)], ids[("T",)]

    # initial potentials: DAG shortest paths in topological order
    INF = (math.inf, math.inf)
    pot: list[tuple[float, float]] = [INF] * N
    pot[S] = (0, 0.0)
    for u in range(N):
        if pot[u] == INF:
            continue
        for e in g.head[u]:
            if g.cap[e] > 0:
                v = g.to[e]
                cand = (pot[u][0] + g.c1[e], pot[u][1] + g.c2[e])
                if cand < pot[v]:
                    pot[v] = cand
    pot = [p if p != INF else (0, 0.0) for p in pot]

    for _ in range(k):
        dist: list[tuple[float, float]] = [INF] * N
        prev_e = [-1] * N
        dist[S] = (0, 0.0)
        done = [False] * N
        heap = [(0, 0.0, S)]
        while heap:
            a, b, u = heapq.heappop(heap)
            if done[u]:
                continue
            done[u] = True
            pu = pot[u]
            for e in g.head[u]:
                if g.cap[e] <= 0:
                    continue
                v = g.to[e]
                if done[v]:
                    continue
                pv = pot[v]
                # reduced costs are nonnegative up to float noise in the second slot
                na = a + g.c1[e] + pu[0] - pv[0]
                nb = b + g.c2[e] + pu[1] - pv[1]
                if (na, nb) < dist[v]:
                    dist[v] = (na, nb)
                    prev_e[v] = e
                    heapq.heappush(heap, (na, nb, v))
        if dist[T] == INF:
            break
        for v in range(N):
            if dist[v] != INF:
                pot[v] = (pot[v][0] + dist[v][0], pot[v][1] + dist[v][1])
        v = T
        while v != S:
            e = prev_e[v]
            g.cap[e] -= 1
            g.cap[e ^ 1] += 1
            v = g.to[e ^ 1]

    # decompose the flow into one walk per server
    flow = {e: g.cap[e ^ 1] for e in range(0, len(g.to), 2) if g.cap[e ^ 1] > 0}
    by_tail: dict[int, list[int]] = {}
    for e in flow:
        by_tail.setdefault(g.to[e ^ 1], []).append(e)
    moves: list[tuple[int, int, int] | None] = [None] * M
    covered = 0
    total = 0.0
    for j, se in enumerate(src_edges):
        if flow.get(se, 0) == 0:
            continue
        flow[se] -= 1
        u = g.to[se]
        key = order[u]
        here = key[1]
        while order[u] != ("T",):
            e = next(e for e in by_tail[u] if flow.get(e, 0) > 0)
            flow[e] -= 1
            v = g.to[e]
            kv = order[v]
            if kv[0] == "Rin":
                i = kv[1]
                moves[i - 1] = (j, here, reqs[i - 1])
                total += float(d[here, reqs[i - 1]])
                covered += 1
                here = reqs[i - 1]
            u = v
    if covered != M or any(mv is None for mv in moves):  # pragma: no cover - defensive
        raise AssertionError(f"flow covered {covered} of {M} requests")
    return OfflineSolution(total, [mv for mv in moves if mv is not None])
