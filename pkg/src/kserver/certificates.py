"""Primal and dual objectives, LP constraint checks and ratio certificates.

The primal variables are the per-step leaf masses ``u_{p,t}`` (with
``z_{v,t}`` reconstructed as the mass entering subtree ``T_v``); the dual
variables are the per-phase increments ``a_{S,t}``, the per-step node
values ``b_{v,t}`` and the initial credits ``gamma_p``.  Index ``t`` of
``b_history`` holds the duals in force *before* request ``t + 1``, so a
run with ``M`` requests has ``M + 1`` snapshots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import InfeasiblePrimal, ZeroDual
from .fractional import TAU_MASS, FractionalState, ServeTrace, step_costs
from .hst import HstTree

TAU_BOUND = 1e-7
TAU_TIGHT = 1e-6
TAU_GAMMA = 1e-9
CERT_SLACK = 1e-6


@dataclass(frozen=True)
class LpViolation:
    constraint: str
    t: int
    where: int
    amount: float

    def __str__(self) -> str:
        return f"{self.constraint} at t={self.t}, index {self.where}: excess {self.amount:.3e}"


@dataclass
class DualLedger:
    """Dual variables recorded along a run."""

    entries: list[tuple[int, tuple[int, ...], float]]
    gamma: np.ndarray
    b_history: list[np.ndarray]
    k: int
    n: int
    initial: tuple[int, ...]
    requests: list[int] = field(default_factory=list)

    @classmethod
    def from_run(cls, start: FractionalState, traces: Sequence[ServeTrace]) -> "DualLedger":
        entries = [(tr.t, ph.S, ph.delta_a) for tr in traces for ph in tr.phases]
        b_hist = [start.b.copy()] + [tr.b_after.copy() for tr in traces]
        return cls(
            entries,
            start.gamma.copy(),
            b_hist,
            start.k,
            start.n,
            start.initial,
            [tr.request for tr in traces],
        )

    def objective_trajectory(self) -> np.ndarray:
        """Dual objective after each request (index 0 is before any)."""
        M = len(self.requests)
        per_t = np.zeros(M + 1)
        for t, S, da in self.entries:
            per_t[t] += (len(S) - self.k) * da
        base = float(self.gamma[[p for p in range(self.n) if p not in self.initial]].sum())
        return base + np.cumsum(per_t)


def u_history_of(start: FractionalState, traces: Sequence[ServeTrace]) -> list[np.ndarray]:
    return [start.leaf_u()] + [tr.leaf_u_after.copy() for tr in traces]


def primal_objective(
    u_history: Sequence[np.ndarray],
    tree: HstTree,
    requests: Sequence[int] | None = None,
) -> float:
    """``sum_t sum_v 2 D(v) max(0, U_{v,t-1} - U_{v,t})`` over subtree sums ``U``.

    With ``requests`` the infinite-cost term is enforced as a gate: a
    request that still holds more than ``TAU_MASS`` raises.
    """
    total = 0.0
    for t in range(1, len(u_history)):
        if requests is not None:
            left = float(u_history[t][requests[t - 1]])
            if left > TAU_MASS:
                raise InfeasiblePrimal(t, left)
        total += step_costs(tree, u_history[t - 1], u_history[t])["lp"]
    return total


def check_primal_feasibility(
    u_history: Sequence[np.ndarray],
    tree: HstTree,
    k: int,
    requests: Sequence[int],
    initial: Sequence[int],
) -> list[LpViolation]:
    """Covering, bounds, initial values and service of every request.

    The covering family over all ``S`` with ``|S| > k`` reduces to
    ``S = [n]``: adding a leaf to ``S`` changes the slack by ``u_p - 1 <= 0``.
    """
    out: list[LpViolation] = []
    n = tree.n
    u0 = np.asarray(u_history[0])
    for p in range(n):
        want = 0.0 if p in initial else 1.0
        if abs(u0[p] - want) > TAU_MASS:
            out.append(LpViolation("initial", 0, p, float(abs(u0[p] - want))))
    for t, u in enumerate(u_history):
        u = np.asarray(u)
        gap = (n - k) - float(u.sum())
        if gap > TAU_MASS:
            out.append(LpViolation("covering", t, -1, gap))
        for p in np.flatnonzero((u < -TAU_MASS) | (u > 1 + TAU_MASS)):
            out.append(LpViolation("bounds", t, int(p), float(max(-u[p], u[p] - 1))))
        if t >= 1 and u[requests[t - 1]] > TAU_MASS:
            out.append(LpViolation("service", t, int(requests[t - 1]), float(u[requests[t - 1]])))
    return out


def dual_objective(ledger: DualLedger) -> float:
    phases = sum((len(S) - ledger.k) * da for _, S, da in ledger.entries)
    credit = sum(float(ledger.gamma[p]) for p in range(ledger.n) if p not in ledger.initial)
    return float(phases + credit)


def check_ledger(ledger: DualLedger) -> list[LpViolation]:
    out = []
    for i, (t, S, da) in enumerate(ledger.entries):
        if da < 0:
            out.append(LpViolation("nonnegative_a", t, i, -da))
        if len(S) <= ledger.k:
            out.append(LpViolation("support_size", t, i, float(ledger.k + 1 - len(S))))
    traj = ledger.objective_trajectory()
    for t in np.flatnonzero(np.diff(traj) < -1e-12):
        out.append(LpViolation("dual_monotone", int(t) + 1, -1, float(traj[t] - traj[t + 1])))
    return out


def check_dual_feasibility(
    b_history: Sequence[np.ndarray],
    ledger: DualLedger,
    tree: HstTree,
) -> list[LpViolation]:
    """Dual constraints on a recorded run, plus the ledger invariants.

    * ``b_bound``: ``b_v <= 2 D(v) (1 + 1e-7)``;
    * ``b_nonneg``: ``b_v >= -1e-7 D(v)``;
    * ``tightness``: for each step ``t`` and leaf ``p != p_t``, the phase
      increments ``a_S`` with ``p`` in ``S`` minus the growth of ``b`` on
      the root path of ``p`` stay below ``1e-6 * max(1, sum a)``;
    * ``gamma``: ``gamma_p <= sum_j b_{A(p, j)}`` at the start (+1e-9).
    """
    out = check_ledger(ledger)
    D = tree.edge_len
    nonroot = np.array([v for v in range(tree.n_nodes) if v != tree.root])
    for t, b in enumerate(b_history):
        b = np.asarray(b)
        over = b[nonroot] - 2 * D[nonroot]
        for i in np.flatnonzero(over > TAU_BOUND * D[nonroot]):
            out.append(LpViolation("b_bound", t, int(nonroot[i]), float(over[i])))
        for i in np.flatnonzero(b[nonroot] < -TAU_BOUND * D[nonroot]):
            out.append(LpViolation("b_nonneg", t, int(nonroot[i]), float(-b[nonroot[i]])))

    paths = [tree.ancestors(p) for p in range(tree.n)]
    by_t: dict[int, list[tuple[tuple[int, ...], float]]] = {}
    for t, S, da in ledger.entries:
        by_t.setdefault(t, []).append((S, da))
    for t in range(1, len(b_history)):
        db = np.asarray(b_history[t]) - np.asarray(b_history[t - 1])
        req = ledger.requests[t - 1] if ledger.requests else -1
        a_sum = np.zeros(tree.n)
        for S, da in by_t.get(t, []):
            a_sum[list(S)] += da
        for p in range(tree.n):
            if p == req:
                continue
            lhs = a_sum[p] - float(db[paths[p]].sum())
            if lhs > TAU_TIGHT * max(1.0, a_sum[p]):
                out.append(LpViolation("tightness", t, p, lhs))

    b1 = np.asarray(b_history[0])
    for p in range(tree.n):
        slack = float(ledger.gamma[p]) - float(b1[paths[p]].sum())
        if slack > TAU_GAMMA:
            out.append(LpViolation("gamma", 0, p, slack))
    return out


def dual_boundary_term(tree: HstTree, b_final: np.ndarray, k: int) -> float:
    """``sum_v b_final(v) * min(|T_v|, n - k)`` over non-root nodes.

    The objective above omits the final dual values, so it can exceed
    the optimum; by summation by parts the excess is at most this term.
    """
    cap = np.minimum(tree.n_leaves, tree.n - k).astype(np.float64)
    mask = np.ones(tree.n_nodes, dtype=bool)
    mask[tree.root] = False
    return float(np.sum(np.asarray(b_final)[mask] * cap[mask]))


@dataclass
class CertResult:
    passed: bool
    ratio: float
    bound: float
    primal: float
    dual: float
    mode: str
    k: int
    ell: int
    h: int | None = None
    h_bound: float | None = None

    @property
    def h_passed(self) -> bool | None:
        if self.h_bound is None:
            return None
        return self.ratio <= self.h_bound * (1 + CERT_SLACK)

    def to_dict(self) -> dict[str, Any]:
        return {
            "passed": self.passed,
            "ratio": self.ratio,
            "bound": self.bound,
            "primal": self.primal,
            "dual": self.dual,
            "mode": self.mode,
            "k": self.k,
            "ell": self.ell,
            "h": self.h,
            "h_bound": self.h_bound,
            "h_passed": self.h_passed,
        }


def ratio_bound(k: int, ell: int, mode: str) -> float:
    if mode == "exact":
        return 15 * math.log1p(k) ** 2
    return 4 * ell * math.log1p(k)


def certify_ratio(
    P: float, D_val: float, k: int, ell: int, mode: str, h: int | None = None
) -> CertResult:
    """Check ``P <= bound * D_val`` with relative slack ``1e-6``.

    ``h`` (weighted mode) is the number of distinct common-ancestor
    depths; the tighter ``4 h ln(1+k)`` bound is reported alongside.
    """
    if P < 0 or D_val < 0:
        raise ValueError("objectives must be nonnegative")
    bound = ratio_bound(k, ell, mode)
    if D_val == 0:
        if P > 0:
            raise ZeroDual(f"primal {P} with zero dual objective")
        ratio = 0.0
    else:
        ratio = P / D_val
    h_bound = 4 * h * math.log1p(k) if (h is not None and mode == "weighted") else None
    return CertResult(
        passed=P <= bound * D_val * (1 + CERT_SLACK),
        ratio=ratio,
        bound=bound,
        primal=P,
        dual=D_val,
        mode=mode,
        k=k,
        ell=ell,
        h=h,
        h_bound=h_bound,
    )


def branching_depths(tree: HstTree) -> int:
    """Number of distinct depths holding a node with two or more children."""
    return len({tree.depth[v] for v in range(tree.n_nodes) if len(tree.children[v]) >= 2})


@dataclass
class CertificationReport:
    primal: float
    dual: float
    cert: CertResult
    primal_violations: list[LpViolation]
    dual_violations: list[LpViolation]
    costs: dict[str, float]

    @property
    def feasible(self) -> bool:
        return not self.primal_violations and not self.dual_violations

    def to_dict(self) -> dict[str, Any]:
        return {
            "primal": self.primal,
            "dual": self.dual,
            "certificate": self.cert.to_dict(),
            "costs": self.costs,
            "primal_violations": [str(v) for v in self.primal_violations],
            "dual_violations": [str(v) for v in self.dual_violations],
            "feasible": self.feasible,
        }


def certify_run(start: FractionalState, traces: Sequence[ServeTrace]) -> CertificationReport:
    """Objectives, constraint checks and ratio certificate for one run."""
    tree = start.tree
    requests = [tr.request for tr in traces]
    u_hist = u_history_of(start, traces)
    ledger = DualLedger.from_run(start, traces)
    P = primal_objective(u_hist, tree, requests)
    Dv = dual_objective(ledger)
    pv = check_primal_feasibility(u_hist, tree, start.k, requests, start.initial)
    dv = check_dual_feasibility(ledger.b_history, ledger, tree)
    h = branching_depths(tree) if start.mode == "weighted" else None
    cert = certify_ratio(P, Dv, start.k, tree.height, start.mode, h)
    costs = {
        "lp": P,
        "inflow": float(sum(tr.inflow_cost for tr in traces)),
        "transport": float(sum(tr.transport_cost for tr in traces)),
        "emd": float(sum(tr.emd_cost for tr in traces)),
    }
    return CertificationReport(P, Dv, cert, pv, dv, costs)
