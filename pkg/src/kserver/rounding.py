"""Randomized rounding of a fractional trajectory on an HST.

Server mass ``x_p = 1 - u_p`` is laid out on ``[0, k)`` in depth-first leaf
order, each leaf owning an interval of length ``x_p``.  For an offset
``theta`` in ``[0, 1)`` the configuration is the set of leaves whose
interval contains one of ``theta, theta + 1, ..., theta + k - 1``.  With
``theta`` uniform every leaf is occupied with probability exactly ``x_p``,
and a leaf with ``x_p = 1`` is always occupied.

Each step redraws ``theta`` uniformly among the offsets that reproduce
the current configuration under the old fractional state, then reads the
new configuration off the new state.  If ``theta`` was uniform before,
it stays uniform, so the marginals hold at every step.  Sharing
``theta`` across steps is what keeps movement small: leaves in
depth-first order are grouped by subtree.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import BadParams, MarginalMismatch
from .fractional import TAU_MASS, step_costs
from .hst import HstTree

SNAP = 1e-9


@dataclass(frozen=True)
class ServerConfiguration:
    occupied: frozenset[int]

    def __post_init__(self) -> None:
        if not self.occupied:
            raise BadParams("configuration is empty")

    @classmethod
    def of(cls, leaves: Sequence[int], n: int | None = None) -> "ServerConfiguration":
        s = frozenset(int(p) for p in leaves)
        if len(s) != len(list(leaves)):
            raise BadParams(f"configuration repeats a leaf: {list(leaves)}")
        if n is not None and any(not 0 <= p < n for p in s):
            raise BadParams(f"configuration has a leaf outside 0..{n - 1}")
        return cls(s)

    @property
    def k(self) -> int:
        return len(self.occupied)

    def indicator(self, n: int) -> np.ndarray:
        x = np.zeros(n)
        x[list(self.occupied)] = 1.0
        return x

    def sorted(self) -> tuple[int, ...]:
        return tuple(sorted(self.occupied))


def seed_stream(seed: int) -> np.random.Generator:
    """Counter-based generator; one per rounding run."""
    return np.random.Generator(np.random.Philox(seed))


def _ends(x: np.ndarray, order: Sequence[int]) -> np.ndarray:
    """Right ends of the leaf intervals laid out in ``order``."""
    return np.cumsum(x[list(order)])


def _locate(ends: np.ndarray, y: np.ndarray) -> np.ndarray:
    # first interval whose right end exceeds y; its left end is <= y
    idx = np.searchsorted(ends, y, side="right")
    return np.minimum(idx, len(ends) - 1)


def _clean_mass(u: np.ndarray, k: int) -> np.ndarray:
    x = 1.0 - np.asarray(u, dtype=np.float64)
    if abs(x.sum() - k) > TAU_MASS * max(1, len(x)):
        raise MarginalMismatch(f"server mass {x.sum():.9f} differs from k={k}")
    x = np.clip(x, 0.0, 1.0)
    x[x < SNAP] = 0.0
    x[x > 1 - SNAP] = 1.0
    frac = (x > 0) & (x < 1)
    drift = k - x.sum()
    if abs(drift) > 0:
        if frac.any():
            x[frac] += drift * x[frac] / x[frac].sum()
            x = np.clip(x, 0.0, 1.0)
        if abs(x.sum() - k) > 1e-6:
            raise MarginalMismatch(f"server mass {x.sum():.9f} differs from k={k}")
    return x


def config_at(x: np.ndarray, order: Sequence[int], k: int, theta: float) -> frozenset[int]:
    idx = _locate(_ends(x, order), theta + np.arange(k))
    return frozenset(int(order[i]) for i in idx)


def consistent_offsets(
    cfg: ServerConfiguration,
    x: np.ndarray,
    order: Sequence[int],
    rng: np.random.Generator,
    size: int = 1,
) -> np.ndarray | None:
    """Uniform draws from the offsets whose configuration equals ``cfg``."""
    ends = _ends(x, order)
    starts = ends - x[list(order)]
    cuts = np.unique(np.clip(np.concatenate([starts % 1.0, ends % 1.0, [0.0, 1.0]]), 0.0, 1.0))
    lo, hi = cuts[:-1], cuts[1:]
    keep = hi - lo > 1e-15
    lo, hi = lo[keep], hi[keep]
    idx = _locate(ends, ((lo + hi) / 2)[:, None] + np.arange(cfg.k)[None, :])
    in_cfg = np.isin(np.asarray(order), list(cfg.occupied))
    good = np.all(in_cfg[idx], axis=1)
    if not good.any():
        return None
    lo, lengths = lo[good], (hi - lo)[good]
    cdf = np.cumsum(lengths)
    w = rng.random(size) * cdf[-1]
    piece = np.minimum(np.searchsorted(cdf, w, side="right"), len(cdf) - 1)
    return lo[piece] + (w - (cdf[piece] - lengths[piece]))


def sample_step(
    cfg: ServerConfiguration,
    u_old: np.ndarray,
    u_new: np.ndarray,
    tree: HstTree,
    rng: np.random.Generator,
    size: int = 1,
) -> np.ndarray:
    """``size`` independent successors of ``cfg``; one row of leaf ids each."""
    k = cfg.k
    x_old = _clean_mass(u_old, k)
    x_new = _clean_mass(u_new, k)
    order = np.asarray(_leaf_order(tree))
    thetas = consistent_offsets(cfg, x_old, order, rng, size)
    if thetas is None:
        thetas = rng.random(size)
    return order[_locate(_ends(x_new, order), thetas[:, None] + np.arange(k)[None, :])]


def sample_transition(
    u_old: np.ndarray,
    u_new: np.ndarray,
    tree: HstTree,
    rng: np.random.Generator,
    size: int,
) -> tuple[np.ndarray, np.ndarray]:
    """``size`` independent (predecessor, successor) pairs of leaf-id rows.

    Each predecessor is drawn with marginals ``1 - u_old`` (a uniform
    offset), then moved by one rounding step.  Draws sharing a
    predecessor are batched; that does not change the joint law.
    """
    k = int(round(float(np.sum(1.0 - np.asarray(u_old)))))
    x_old = _clean_mass(u_old, k)
    order = np.asarray(_leaf_order(tree))
    before = np.sort(order[_locate(_ends(x_old, order), rng.random(size)[:, None] + np.arange(k)[None, :])], axis=1)
    after = np.empty_like(before)
    keys, inverse = np.unique(before, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    for j, row in enumerate(keys):
        idx = np.flatnonzero(inverse == j)
        cfg = ServerConfiguration(frozenset(int(p) for p in row))
        after[idx] = sample_step(cfg, u_old, u_new, tree, rng, idx.size)
    return before, after


def round_step(
    cfg: ServerConfiguration,
    u_old: np.ndarray,
    u_new: np.ndarray,
    tree: HstTree,
    rng: np.random.Generator,
) -> tuple[ServerConfiguration, float]:
    """Move from ``cfg`` to a configuration drawn with marginals ``1 - u_new``.

    The cost is the tree transport distance between the two configurations
    (optimal matching on a tree).
    """
    if np.array_equal(np.asarray(u_old), np.asarray(u_new)):
        _clean_mass(u_old, cfg.k)
        return cfg, 0.0
    new = ServerConfiguration(frozenset(int(p) for p in sample_step(cfg, u_old, u_new, tree, rng)[0]))
    n = tree.n
    cost = step_costs(tree, 1.0 - cfg.indicator(n), 1.0 - new.indicator(n))["emd"]
    return new, cost


def _leaf_order(tree: HstTree) -> list[int]:
    cache = getattr(tree, "_dfs_order", None)
    if cache is None:
        cache = tree.leaf_order()
        tree._dfs_order = cache
    return cache


@dataclass
class RoundedRun:
    cost: float
    step_costs: list[float]
    configs: list[ServerConfiguration]


def run_rounded(
    u_history: Sequence[np.ndarray],
    initial: ServerConfiguration,
    seed: int,
    tree: HstTree,
    requests: Sequence[int] | None = None,
) -> RoundedRun:
    """Round a whole trajectory (``u_history[0]`` is the start state)."""
    rng = seed_stream(seed)
    cfg = initial
    configs = [cfg]
    costs = []
    for t in range(1, len(u_history)):
        cfg, c = round_step(cfg, u_history[t - 1], u_history[t], tree, rng)
        if requests is not None and requests[t - 1] not in cfg.occupied:
            raise AssertionError(f"request {requests[t - 1]} left uncovered at step {t}")
        configs.append(cfg)
        costs.append(c)
    return RoundedRun(float(sum(costs)), costs, configs)


def metric_cost(configs: Sequence[ServerConfiguration], dist: np.ndarray) -> float:
    """Movement of a configuration sequence measured in another metric."""
    total = 0.0
    for a, b in zip(configs, configs[1:]):
        if a == b:
            continue
        A, B = sorted(a.occupied - b.occupied), sorted(b.occupied - a.occupied)
        cost = dist[np.ix_(A, B)]
        r, c = linear_sum_assignment(cost)
        total += float(cost[r, c].sum())
    return total
