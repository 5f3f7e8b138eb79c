"""Dense reference solver for the serve-time rate system.

Used only to cross-check the closed-form and recursive rate engines in
:mod:`kserver.fractional`.  Unknowns are the rates ``db_v/da`` of the
active non-root nodes; equations are

* node identity for every active internal non-root node ``x``:
  ``B_x r_x / D_x = sum_{c in NFC(x)} B_c r_c / D_c``;
* conservation at the root: ``sum_{c in NFC(root)} B_c r_c / D_c = 0``;
* tightness for every active leaf ``p != p_t``: the rates on the path
  from the root to ``p`` sum to 1.

Here ``B_v = u_v + NL_v / k``.
"""

from __future__ import annotations

import numpy as np

from .hst import HstTree


def solve_rates(
    tree: HstTree,
    k: int,
    u: np.ndarray,
    nl: np.ndarray,
    request_leaf: int,
) -> np.ndarray:
    """Return per-node rates (zero on inactive nodes and the root)."""
    active = [v for v in range(tree.n_nodes) if v != tree.root and nl[v] > 0]
    col = {v: i for i, v in enumerate(active)}
    m = len(active)
    B = u + nl / k
    D = tree.edge_len
    rows: list[np.ndarray] = []
    rhs: list[float] = []

    def identity_row(x: int, with_self: bool) -> np.ndarray:
        row = np.zeros(m)
        if with_self:
            row[col[x]] = B[x] / D[x]
        for c in tree.children[x]:
            if c in col:
                row[col[c]] -= B[c] / D[c]
        return row

    for x in active:
        if not tree.is_leaf(x):
            rows.append(identity_row(x, True))
            rhs.append(0.0)
    rows.append(identity_row(tree.root, False))
    rhs.append(0.0)
    for x in active:
        if tree.is_leaf(x) and x != request_leaf:
            row = np.zeros(m)
            for v in tree.root_path(x)[1:]:
                row[col[v]] = 1.0
            rows.append(row)
            rhs.append(1.0)
    A = np.array(rows)
    sol = np.linalg.solve(A, np.array(rhs))
    r = np.zeros(tree.n_nodes)
    for v, i in col.items():
        r[v] = sol[i]
    return r


def system_residual(
    tree: HstTree,
    k: int,
    u: np.ndarray,
    nl: np.ndarray,
    request_leaf: int,
    r: np.ndarray,
) -> float:
    """Largest violation of the rate equations by ``r``.

    Identity rows are scaled by ``D`` of the node so the residual is
    dimensionless.
    """
    B = u + nl / k
    D = tree.edge_len
    worst = 0.0
    for x in range(tree.n_nodes):
        if nl[x] <= 0 or tree.is_leaf(x):
            continue
        inflow = sum(B[c] * r[c] / D[c] for c in tree.children[x] if nl[c] > 0)
        own = B[x] * r[x] / D[x] if x != tree.root else 0.0
        scale = D[x] if x != tree.root else max(D[c] for c in tree.children[x])
        worst = max(worst, abs(own - inflow) * scale)
    for x in range(tree.n_nodes):
        if tree.is_leaf(x) and nl[x] > 0 and x != request_leaf:
            total = sum(r[v] for v in tree.root_path(x)[1:])
            worst = max(worst, abs(total - 1.0))
    return worst
