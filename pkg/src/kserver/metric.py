"""Finite metric spaces: validation, generators and a JSON file format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import (
    AsymmetricMatrix,
    BadParams,
    NonpositiveOffDiagonal,
    NonzeroDiagonal,
    NotSquare,
    ParseError,
    TriangleViolation,
)

TAU_METRIC = 1e-9

KINDS = ("uniform", "line", "star", "random_euclidean", "random_tree")


@dataclass(frozen=True, eq=False)
class FiniteMetric:
    """An n-point metric stored as a dense float64 matrix.

    Build through :func:`validate_metric`; the constructor does not check
    the metric axioms.
    """

    dist: np.ndarray
    labels: tuple[str, ...] | None = field(default=None)

    def __post_init__(self) -> None:
        self.dist.setflags(write=False)

    @property
    def n(self) -> int:
        return self.dist.shape[0]

    def __call__(self, i: int, j: int) -> float:
        return float(self.dist[i, j])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FiniteMetric):
            return NotImplemented
        return (
            self.dist.shape == other.dist.shape
            and bool(np.array_equal(self.dist, other.dist))
            and self.labels == other.labels
        )

    def __hash__(self) -> int:
        return hash((self.dist.tobytes(), self.labels))


def validate_metric(raw: Any, labels: Sequence[str] | None = None) -> FiniteMetric:
    d = np.array(raw, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise NotSquare(f"expected a square matrix, got shape {d.shape}")
    n = d.shape[0]
    if n < 2:
        raise NotSquare("a metric needs at least 2 points")
    if labels is not None and len(labels) != n:
        raise BadParams(f"{len(labels)} labels for {n} points")
    scale = float(np.max(np.abs(d))) or 1.0
    tol = TAU_METRIC * scale

    for i in range(n):
        if d[i, i] != 0.0:
            raise NonzeroDiagonal(i, float(d[i, i]))
    diff = np.abs(d - d.T)
    if diff.max() > tol:
        i, j = np.unravel_index(int(np.argmax(diff)), diff.shape)
        i, j = min(i, j), max(i, j)
        raise AsymmetricMatrix(int(i), int(j), float(d[i, j]), float(d[j, i]))
    off = ~np.eye(n, dtype=bool)
    if np.any(d[off] <= 0.0):
        i, j = np.argwhere((d <= 0.0) & off)[0]
        raise NonpositiveOffDiagonal(int(i), int(j), float(d[i, j]))
    for s in range(n):
        # excess[i, j] = d(i,j) - d(i,s) - d(s,j)
        excess = d - d[:, s, None] - d[None, s, :]
        if excess.max() > tol:
            i, j = np.unravel_index(int(np.argmax(excess)), excess.shape)
            raise TriangleViolation(int(i), s, int(j), float(excess[i, j]))
    return FiniteMetric(d, tuple(labels) if labels is not None else None)


def generate_metric(
    kind: str, n: int, params: dict[str, Any] | None = None, seed: int = 0
) -> FiniteMetric:
    """Build a metric of the given kind.

    Parameters per kind: ``uniform`` (``scale``), ``line`` (``spacing``),
    ``star`` (``arms``: n-1 lengths, point 0 is the hub), ``random_euclidean``
    (``dim``), ``random_tree`` (``min_len``, ``max_len``).
    """
    params = dict(params or {})
    if n < 2:
        raise BadParams("n must be at least 2")
    rng = np.random.default_rng(seed)

    if kind == "uniform":
        scale = float(params.get("scale", 1.0))
        if scale <= 0:
            raise BadParams("scale must be positive")
        d = np.full((n, n), scale)
        np.fill_diagonal(d, 0.0)
    elif kind == "line":
        spacing = float(params.get("spacing", 1.0))
        if spacing <= 0:
            raise BadParams("spacing must be positive")
        x = np.arange(n, dtype=np.float64) * spacing
        d = np.abs(x[:, None] - x[None, :])
    elif kind == "star":
        arms = params.get("arms")
        if arms is None:
            arms = rng.uniform(0.5, 2.0, size=n - 1)
        arms = np.asarray(arms, dtype=np.float64)
        if arms.shape != (n - 1,) or np.any(arms <= 0):
            raise BadParams("star needs n-1 positive arm lengths")
        a = np.concatenate([[0.0], arms])
        d = a[:, None] + a[None, :]
        np.fill_diagonal(d, 0.0)
    elif kind == "random_euclidean":
        dim = int(params.get("dim", 2))
        if dim < 1:
            raise BadParams("dim must be >= 1")
        pts = rng.uniform(0.0, 1.0, size=(n, dim))
        d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1))
    elif kind == "random_tree":
        lo = float(params.get("min_len", 0.5))
        hi = float(params.get("max_len", 2.0))
        if not 0 < lo <= hi:
            raise BadParams("need 0 < min_len <= max_len")
        d = np.zeros((n, n))
        for v in range(1, n):
            u = int(rng.integers(0, v))
            w = float(rng.uniform(lo, hi))
            d[v, :v] = d[u, :v] + w
            d[:v, v] = d[v, :v]
    else:
        raise BadParams(f"unknown metric kind {kind!r}; expected one of {KINDS}")
    return validate_metric(d)


def metric_to_dict(m: FiniteMetric) -> dict[str, Any]:
    return {
        "n": m.n,
        "labels": list(m.labels) if m.labels is not None else None,
        "dist": m.dist.tolist(),
    }


def serialize_metric(m: FiniteMetric) -> str:
    doc = metric_to_dict(m)
    rows = ",\n".join("    " + json.dumps(row) for row in doc["dist"])
    return (
        "{\n"
        f'  "n": {doc["n"]},\n'
        f'  "labels": {json.dumps(doc["labels"])},\n'
        f'  "dist": [\n{rows}\n  ]\n'
        "}\n"
    )


def _locate(text: str, needle: str) -> tuple[int, int]:
    idx = text.find(needle)
    if idx < 0:
        return 1, 1
    line = text.count("\n", 0, idx) + 1
    col = idx - (text.rfind("\n", 0, idx) + 1) + 1
    return line, col


def parse_metric(text: str) -> FiniteMetric:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.colno) from exc
    if not isinstance(doc, dict):
        raise ParseError("top level must be an object", 1, 1)
    for key in ("n", "dist"):
        if key not in doc:
            raise ParseError(f"missing field {key!r}", 1, 1)
    n = doc["n"]
    dist = doc["dist"]
    line, col = _locate(text, '"dist"')
    if not isinstance(n, int) or n < 2:
        raise ParseError("field 'n' must be an integer >= 2", *_locate(text, '"n"'))
    if not isinstance(dist, list) or len(dist) != n:
        got = len(dist) if isinstance(dist, list) else "no"
        raise ParseError(f"'dist' has {got} rows, expected {n}", line, col)
    for r, row in enumerate(dist):
        if not isinstance(row, list) or len(row) != n:
            raise ParseError(f"row {r} of 'dist' must have {n} entries", line, col)
        if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in row):
            raise ParseError(f"row {r} of 'dist' has a non-numeric entry", line, col)
    labels = doc.get("labels")
    if labels is not None and (
        not isinstance(labels, list) or not all(isinstance(s, str) for s in labels)
    ):
        raise ParseError("'labels' must be a list of strings or null", *_locate(text, '"labels"'))
    return validate_metric(dist, labels)


def load_metric(path: str) -> FiniteMetric:
    with open(path, encoding="utf-8") as fh:
        return parse_metric(fh.read())


def save_metric(m: FiniteMetric, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_metric(m))
