"""Hierarchically well-separated trees.

Covers the randomized embedding of a finite metric into an exact
sigma-HST, heavy-path depth reduction into a weighted HST, structural
verification, leaf distances and a JSON file format.

Nodes are integers; metric points are the integers ``0..n-1`` and every
point owns exactly one leaf node (``tree.leaf_node[p]``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import BadParams, ParseError, UnknownLeaf
from .metric import FiniteMetric

REL_TOL = 1e-9


class HstTree:
    """Rooted tree with per-node parent-edge lengths.

    ``weighted=False`` marks an exact sigma-HST; ``weighted=True`` a
    weighted one, where only ``D(v) >= sigma * D(child)`` is promised.
    """

    def __init__(
        self,
        parent: Sequence[int],
        edge_len: Sequence[float],
        point: Sequence[int],
        sigma: float,
        *,
        weighted: bool = False,
        labels: Sequence[str] | None = None,
    ):
        self.parent = [int(p) for p in parent]
        self.edge_len = np.asarray(edge_len, dtype=np.float64)
        self.edge_len.setflags(write=False)
        self.point = [int(p) for p in point]
        self.sigma = float(sigma)
        self.weighted = bool(weighted)
        self.labels = tuple(labels) if labels is not None else None
        self.report: dict[str, Any] = {}
        self._build()

    def _build(self) -> None:
        N = len(self.parent)
        if not (len(self.edge_len) == len(self.point) == N):
            raise BadParams("parent, edge_len and point must have equal length")
        roots = [v for v in range(N) if self.parent[v] < 0]
        if len(roots) != 1:
            raise BadParams(f"expected exactly one root, found {len(roots)}")
        self.root = roots[0]
        self.children: list[list[int]] = [[] for _ in range(N)]
        for v, p in enumerate(self.parent):
            if p >= 0:
                if not 0 <= p < N:
                    raise BadParams(f"node {v} has unknown parent {p}")
                self.children[p].append(v)

        self.depth = [-1] * N
        self.root_dist = np.zeros(N)
        order = [self.root]
        self.depth[self.root] = 0
        for v in order:
            for c in self.children[v]:
                self.depth[c] = self.depth[v] + 1
                self.root_dist[c] = self.root_dist[v] + self.edge_len[c]
                order.append(c)
        if len(order) != N:
            raise BadParams("parent array is not a connected tree")
        self.preorder = order
        self.postorder = order[::-1]

        points = [p for p in self.point if p >= 0]
        n = len(points)
        if sorted(points) != list(range(n)):
            raise BadParams("leaf points must be exactly 0..n-1, each used once")
        self.leaf_node = [0] * n
        for v, p in enumerate(self.point):
            if p >= 0:
                if self.children[v]:
                    raise BadParams(f"node {v} carries point {p} but is not a leaf")
                self.leaf_node[p] = v
            elif not self.children[v]:
                raise BadParams(f"leaf node {v} carries no point")

        self.n_leaves = np.zeros(N, dtype=np.int64)
        for v in self.postorder:
            if self.point[v] >= 0:
                self.n_leaves[v] = 1
            else:
                self.n_leaves[v] = sum(self.n_leaves[c] for c in self.children[v])

    # basic shape ---------------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.leaf_node)

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    @property
    def height(self) -> int:
        """Largest leaf depth (the tree depth ``ell``)."""
        return max(self.depth[v] for v in self.leaf_node)

    def is_leaf(self, v: int) -> bool:
        return self.point[v] >= 0

    def D(self, v: int) -> float:
        return float(self.edge_len[v])

    def check_point(self, p: int) -> int:
        if not isinstance(p, (int, np.integer)) or not 0 <= p < self.n:
            raise UnknownLeaf(f"{p!r} is not a leaf point of this tree")
        return int(p)

    def root_path(self, v: int) -> list[int]:
        """Nodes from the root down to ``v`` (both included)."""
        path = []
        while v >= 0:
            path.append(v)
            v = self.parent[v]
        return path[::-1]

    def ancestors(self, p: int) -> list[int]:
        """``A(p, 1), ..., A(p, depth)``: the non-root nodes above leaf ``p``."""
        return self.root_path(self.leaf_node[self.check_point(p)])[1:]

    def lca(self, a: int, b: int) -> int:
        while self.depth[a] > self.depth[b]:
            a = self.parent[a]
        while self.depth[b] > self.depth[a]:
            b = self.parent[b]
        while a != b:
            a, b = self.parent[a], self.parent[b]
        return a

    def node_distance(self, a: int, b: int) -> float:
        c = self.lca(a, b)
        return float(self.root_dist[a] + self.root_dist[b] - 2 * self.root_dist[c])

    def leaf_points(self, v: int) -> list[int]:
        out = []
        stack = [v]
        while stack:
            x = stack.pop()
            if self.point[x] >= 0:
                out.append(self.point[x])
            stack.extend(self.children[x])
        return sorted(out)

    def leaf_order(self) -> list[int]:
        """Points in depth-first order (siblings in stored order)."""
        out = []
        stack = [self.root]
        while stack:
            x = stack.pop()
            if self.point[x] >= 0:
                out.append(self.point[x])
            stack.extend(reversed(self.children[x]))
        return out

    def distance_matrix(self) -> np.ndarray:
        leaves = self.leaf_node
        n = len(leaves)
        d = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                d[i, j] = d[j, i] = self.node_distance(leaves[i], leaves[j])
        return d

    def copy_with(self, **changes: Any) -> "HstTree":
        kw = dict(
            parent=self.parent,
            edge_len=self.edge_len,
            point=self.point,
            sigma=self.sigma,
            weighted=self.weighted,
            labels=self.labels,
        )
        kw.update(changes)
        return HstTree(**kw)

    def __repr__(self) -> str:
        kind = "weighted" if self.weighted else "exact"
        return (
            f"HstTree({kind}, n={self.n}, nodes={self.n_nodes}, "
            f"depth={self.height}, sigma={self.sigma:g})"
        )


def leaf_distance(t: HstTree, p: int, q: int) -> float:
    p, q = t.check_point(p), t.check_point(q)
    if p == q:
        return 0.0
    return t.node_distance(t.leaf_node[p], t.leaf_node[q])


# construction helpers ---------------------------------------------------------


class _Builder:
    def __init__(self) -> None:
        self.parent: list[int] = []
        self.edge: list[float] = []
        self.point: list[int] = []

    def add(self, parent: int, edge: float, point: int = -1) -> int:
        self.parent.append(parent)
        self.edge.append(edge)
        self.point.append(point)
        return len(self.parent) - 1

    def tree(self, sigma: float, weighted: bool = False, labels=None) -> HstTree:
        return HstTree(self.parent, self.edge, self.point, sigma, weighted=weighted, labels=labels)


def balanced_hst(branching: int, depth: int, sigma: float = 8.0, top: float = 1.0) -> HstTree:
    """Complete ``branching``-ary exact sigma-HST; root children have edge ``top``."""
    if branching < 1 or depth < 1:
        raise BadParams("branching and depth must be >= 1")
    b = _Builder()
    frontier = [b.add(-1, 0.0)]
    for lvl in range(1, depth + 1):
        length = top / sigma ** (lvl - 1)
        nxt = []
        for v in frontier:
            for _ in range(branching):
                nxt.append(b.add(v, length))
        frontier = nxt
    for i, v in enumerate(frontier):
        b.point[v] = i
    return b.tree(sigma)


def caterpillar_hst(n: int, sigma: float = 8.0, top: float = 1.0) -> HstTree:
    """Exact sigma-HST of depth n-1 where each spine node splits off one leaf."""
    if n < 2:
        raise BadParams("n must be >= 2")
    ell = n - 1
    lens = [0.0] + [top / sigma ** (j - 1) for j in range(1, ell + 1)]
    b = _Builder()
    spine = b.add(-1, 0.0)
    leaves = []
    for i in range(ell - 1):
        # branch off a unary chain from spine depth i to a leaf at depth ell
        v = spine
        for j in range(i + 1, ell + 1):
            v = b.add(v, lens[j])
        leaves.append(v)
        spine = b.add(spine, lens[i + 1])
    leaves.append(b.add(spine, lens[ell]))
    leaves.append(b.add(spine, lens[ell]))
    for i, v in enumerate(leaves):
        b.point[v] = i
    return b.tree(sigma)


def random_hst(
    n: int,
    depth: int,
    sigma: float = 8.0,
    seed: int = 0,
    *,
    ratios: Sequence[float] | None = None,
    top: float = 1.0,
) -> HstTree:
    """Random tree with all ``n`` leaves at ``depth``.

    Leaves are split recursively into random nonempty groups.  With
    ``ratios`` (one per internal depth ``1..depth-1``) the result is a
    weighted HST whose depth-j nodes have edge ``D_j`` and
    ``D_j / D_{j+1} = ratios[j-1]``; otherwise it is an exact sigma-HST.
    """
    if n < 2 or depth < 1:
        raise BadParams("need n >= 2 and depth >= 1")
    if ratios is not None:
        ratios = [float(r) for r in ratios]
        if len(ratios) != depth - 1:
            raise BadParams(f"need {depth - 1} ratios, got {len(ratios)}")
    rng = np.random.default_rng(seed)
    lens = [0.0, top]
    for j in range(1, depth):
        lens.append(lens[-1] / (ratios[j - 1] if ratios is not None else sigma))
    b = _Builder()
    perm = [int(x) for x in rng.permutation(n)]

    def grow(parent: int, pts: list[int], lvl: int) -> None:
        # parent sits at depth lvl
        if lvl + 1 == depth:
            for p in pts:
                b.add(parent, lens[depth], p)
            return
        lo = 2 if lvl == 0 else 1
        k = int(rng.integers(lo, min(len(pts), 3) + 1)) if len(pts) >= lo else 1
        cuts = sorted(int(c) for c in rng.choice(np.arange(1, len(pts)), size=k - 1, replace=False))
        for g in np.split(np.array(pts), cuts):
            grow(b.add(parent, lens[lvl + 1]), [int(p) for p in g], lvl + 1)

    grow(b.add(-1, 0.0), perm, 0)
    return b.tree(sigma, weighted=ratios is not None)


# FRT-style embedding ----------------------------------------------------------


def frt_embed(m: FiniteMetric, sigma: float = 8.0, seed: int = 0) -> HstTree:
    """Random laminar decomposition of ``m`` into an exact sigma-HST.

    A random permutation orders the centres and ``beta = sigma**U`` with
    ``U ~ Uniform[0, 1)`` scales the radii ``R_i = beta * diam / sigma**i``.
    Every level-(i-1) cluster is refined by assigning each point to the
    first centre (in permutation order) within distance ``R_i``.  A node at
    depth ``i`` gets edge length ``R_{i-1}``, which makes the tree dominate
    the metric.  Singleton clusters are carried down as unary chains so all
    leaves sit at the same depth.
    """
    if sigma <= 1:
        raise BadParams("sigma must be > 1")
    rng = np.random.default_rng(seed)
    n = m.n
    d = m.dist
    perm = rng.permutation(n)
    rank = np.empty(n, dtype=np.int64)
    rank[perm] = np.arange(n)
    beta = sigma ** rng.uniform(0.0, 1.0)
    diam = float(d.max())

    b = _Builder()
    root = b.add(-1, 0.0)
    clusters: list[tuple[int, list[int]]] = [(root, list(range(n)))]
    level = 0
    while any(len(pts) > 1 for _, pts in clusters):
        level += 1
        r_prev = beta * diam / sigma ** (level - 1)
        r_cur = beta * diam / sigma**level
        nxt: list[tuple[int, list[int]]] = []
        for node, pts in clusters:
            groups: dict[int, list[int]] = {}
            for x in pts:
                within = [c for c in perm if d[x, c] <= r_cur]
                centre = int(within[0])
                groups.setdefault(centre, []).append(x)
            for g in sorted(groups.values(), key=min):
                nxt.append((b.add(node, r_prev), sorted(g)))
        clusters = nxt
    for node, pts in clusters:
        b.point[node] = pts[0]
    if level == 0:  # pragma: no cover - n >= 2 always splits
        raise BadParams("metric has a single point")
    t = b.tree(sigma, labels=m.labels)
    t.report = {"beta": float(beta), "levels": level, "permutation": [int(x) for x in perm]}
    return t


# depth reduction ------------------------------------------------------------------


def reduce_depth(t: HstTree) -> HstTree:
    """Heavy-path contraction into a weighted HST of depth <= ceil(log2 n) + 1.

    A child ``c`` of ``v`` is heavy when it holds more than half of
    ``v``'s leaves.  Each maximal chain of internal nodes linked by heavy
    edges collapses into one node that keeps the parent-edge length of the
    chain's top node; everything hanging off the chain becomes its child
    and keeps its own edge length.  Leaves are never merged, so every leaf
    keeps its original parent-edge length.  Leaf distances can only
    shrink, and by at most a factor ``2 sigma / (sigma - 1)``.
    """
    b = _Builder()

    def heavy(v: int) -> int | None:
        for c in t.children[v]:
            if not t.is_leaf(c) and 2 * t.n_leaves[c] > t.n_leaves[v]:
                return c
        return None

    stack: list[tuple[int, int]] = [(t.root, -1)]
    while stack:
        top, new_parent = stack.pop()
        edge = t.D(top) if new_parent >= 0 else 0.0
        if t.is_leaf(top):
            b.add(new_parent, edge, t.point[top])
            continue
        x = b.add(new_parent, edge)
        chain = [top]
        while (h := heavy(chain[-1])) is not None:
            chain.append(h)
        in_chain = set(chain)
        hanging = [c for v in chain for c in t.children[v] if c not in in_chain]
        for c in reversed(hanging):
            stack.append((c, x))

    out = b.tree(t.sigma, weighted=True, labels=t.labels)
    n = t.n
    if n >= 2:
        d_old = t.distance_matrix()
        d_new = out.distance_matrix()
        iu = np.triu_indices(n, 1)
        ratio = d_new[iu] / d_old[iu]
        rho = 2 * t.sigma / (t.sigma - 1)
        lo, hi = float(ratio.min()), float(ratio.max())
        if lo < 1 / rho * (1 - REL_TOL) or hi > rho * (1 + REL_TOL):
            raise AssertionError(f"depth reduction distortion [{lo}, {hi}] exceeds {rho}")
        out.report = {
            "min_ratio": lo,
            "max_ratio": hi,
            "max_distortion": max(hi, 1 / lo),
            "depth": out.height,
            "depth_bound": math.ceil(math.log2(n)) + 1,
            "depth_over_log2n": out.height / max(math.log2(n), 1.0),
        }
    return out


# verification -------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    prop: str
    nodes: tuple[int, ...]
    detail: str


@dataclass
class StructureReport:
    violations: list[Violation] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.violations)

    def __len__(self) -> int:
        return len(self.violations)

    def props(self) -> set[str]:
        return {v.prop for v in self.violations}

    def add(self, prop: str, nodes: Iterable[int], detail: str) -> None:
        self.violations.append(Violation(prop, tuple(int(x) for x in nodes), detail))


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= REL_TOL * max(abs(a), abs(b), 1e-300)


def verify_hst(t: HstTree, weighted: bool | None = None) -> StructureReport:
    """Check the HST properties; an empty report means the tree is valid.

    Property tags: ``sibling`` (equal child edges), ``stretch`` (exact
    ``D(v) = sigma D(w)``), ``min_stretch`` (weighted ``D(v) >= sigma D(w)``),
    ``leaf_edge`` (equal leaf edges), ``leaf_depth`` (equal leaf depth,
    exact mode only), ``edge`` (positive lengths).
    """
    weighted = t.weighted if weighted is None else weighted
    rep = StructureReport()
    for v in range(t.n_nodes):
        if v != t.root and not t.edge_len[v] > 0:
            rep.add("edge", [v], f"edge length {t.edge_len[v]!r} is not positive")
    for v in range(t.n_nodes):
        kids = t.children[v]
        if not kids:
            continue
        lens = [t.D(c) for c in kids]
        if not all(_close(lens[0], x) for x in lens):
            rep.add("sibling", [v], f"children of {v} have edge lengths {sorted(set(lens))}")
        if v == t.root:
            continue
        for c in kids:
            ratio = t.D(v) / t.D(c) if t.D(c) > 0 else math.inf
            if weighted:
                if ratio < t.sigma * (1 - REL_TOL):
                    rep.add(
                        "min_stretch",
                        [v, c],
                        f"depth {t.depth[v]}: D({v})/D({c}) = {ratio:.6g} < sigma = {t.sigma:g}",
                    )
            elif not _close(ratio, t.sigma):
                rep.add(
                    "stretch",
                    [v, c],
                    f"depth {t.depth[v]}: D({v})/D({c}) = {ratio:.6g} != sigma = {t.sigma:g}",
                )
    leaf_lens = [t.D(v) for v in t.leaf_node]
    ref = leaf_lens[0]
    bad = [v for v, x in zip(t.leaf_node, leaf_lens) if not _close(x, ref)]
    if bad:
        rep.add("leaf_edge", bad, f"leaf edges differ from {ref:g}")
    if not weighted:
        depths = {t.depth[v] for v in t.leaf_node}
        if len(depths) > 1:
            rep.add("leaf_depth", [], f"leaves at depths {sorted(depths)}")
    return rep


# file format ------------------------------------------------------------------------


def tree_to_dict(t: HstTree) -> dict[str, Any]:
    nodes = []
    for v in range(t.n_nodes):
        nodes.append(
            {
                "id": v,
                "parent": t.parent[v] if t.parent[v] >= 0 else None,
                "edge_len": float(t.edge_len[v]),
                "leaf": t.point[v] if t.point[v] >= 0 else None,
            }
        )
    return {
        "sigma": t.sigma,
        "weighted": t.weighted,
        "root": t.root,
        "labels": list(t.labels) if t.labels is not None else None,
        "nodes": nodes,
    }


def tree_from_dict(doc: dict[str, Any]) -> HstTree:
    try:
        nodes = sorted(doc["nodes"], key=lambda x: x["id"])
        ids = [x["id"] for x in nodes]
        if ids != list(range(len(nodes))):
            raise BadParams("node ids must be 0..N-1")
        parent = [-1 if x["parent"] is None else int(x["parent"]) for x in nodes]
        if parent[int(doc["root"])] != -1:
            raise BadParams("root node has a parent")
        edge = [float(x["edge_len"]) for x in nodes]
        point = [-1 if x.get("leaf") is None else int(x["leaf"]) for x in nodes]
        return HstTree(
            parent,
            edge,
            point,
            float(doc["sigma"]),
            weighted=bool(doc.get("weighted", False)),
            labels=doc.get("labels"),
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed tree document: {exc!r}", 1, 1) from exc


def save_tree(t: HstTree, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(tree_to_dict(t), fh, indent=1)
        fh.write("\n")


def load_tree(path: str) -> HstTree:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.colno) from exc
    return tree_from_dict(doc)


def tree_metric(t: HstTree) -> FiniteMetric:
    from .metric import validate_metric

    return validate_metric(t.distance_matrix(), t.labels)
