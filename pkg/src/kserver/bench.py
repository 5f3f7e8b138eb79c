"""Request generators and the end-to-end experiment pipeline.

One run: metric -> random HST -> optional depth reduction -> fractional
serve -> LP certificates -> randomized rounding -> offline optimum on the
tree and on the original metric.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .baselines import greedy_nearest
from .certificates import certify_run, u_history_of
from .errors import BadParams, StageError
from .fractional import init_state, serve_sequence
from .hst import frt_embed, reduce_depth, tree_metric
from .metric import FiniteMetric, generate_metric, load_metric
from .offline import opt_min_cost_flow
from .rounding import ServerConfiguration, metric_cost, run_rounded

GENERATORS = ("round_robin_lower_bound", "uniform_random", "zipf", "adversarial_greedy")

# CSV column order; documented in the README
COLUMNS = (
    "seed",
    "n",
    "k",
    "M",
    "mode",
    "depth",
    "frac_cost",
    "frac_emd",
    "dual",
    "bound",
    "ratio_pd",
    "cert_passed",
    "violations",
    "rounded_tree_mean",
    "rounded_tree_se",
    "rounded_metric_mean",
    "rounded_metric_se",
    "c_probe",
    "opt_tree",
    "opt_metric",
    "ratio_tree",
    "ratio_metric",
    "trivial",
)


# requests ---------------------------------------------------------------------------


def _as_dist(metric: FiniteMetric | np.ndarray | int) -> np.ndarray | None:
    if isinstance(metric, FiniteMetric):
        return metric.dist
    if isinstance(metric, np.ndarray):
        return metric
    return None


def generate_requests(
    kind: str,
    metric: FiniteMetric | np.ndarray | int,
    k: int,
    M: int,
    seed: int = 0,
    *,
    initial: Sequence[int] | None = None,
    s: float = 1.1,
) -> list[int]:
    """A request sequence of length ``M``; deterministic per ``seed``.

    ``metric`` may be a bare point count for the generators that ignore
    distances (``uniform_random``, ``zipf``, ``round_robin_lower_bound``).

    * ``round_robin_lower_bound``: the ``k + 1`` points ``initial + [x]``;
      always request the one a lazy least-recently-requested reference
      does not cover, which cycles through them.
    * ``uniform_random``: independent uniform points.
    * ``zipf``: point ``i`` has rank ``i + 1`` and weight ``rank**-s``.
    * ``adversarial_greedy``: request the uncovered point farthest from
      the nearest server of a simulated greedy algorithm.
    """
    dist = _as_dist(metric)
    n = int(dist.shape[0]) if dist is not None else int(metric)
    if M < 0:
        raise BadParams("M must be >= 0")
    if not 1 <= k < n:
        raise BadParams(f"need 1 <= k < n, got k={k}, n={n}")
    if kind not in GENERATORS:
        raise BadParams(f"unknown generator {kind!r}; expected one of {GENERATORS}")
    init = list(range(k)) if initial is None else [int(p) for p in initial]
    if len(init) != k or len(set(init)) != k:
        raise BadParams("initial must list k distinct points")
    rng = np.random.default_rng(seed)
    if M == 0:
        return []

    if kind == "uniform_random":
        return [int(p) for p in rng.integers(0, n, size=M)]

    if kind == "zipf":
        if s <= 0:
            raise BadParams("zipf exponent must be positive")
        w = np.arange(1, n + 1, dtype=np.float64) ** -s
        return [int(p) for p in rng.choice(n, size=M, p=w / w.sum())]

    if kind == "round_robin_lower_bound":
        rest = [p for p in range(n) if p not in init]
        extra = int(rng.choice(rest))
        cover = list(init)
        last = {p: -1 - i for i, p in enumerate(reversed(init))}
        out = []
        for t in range(M):
            r = extra if not out else next(p for p in init + [extra] if p not in cover)
            out.append(r)
            victim = min(cover, key=lambda p: last[p])
            cover[cover.index(victim)] = r
            last[r] = t
        return out

    # adversarial_greedy
    if dist is None:
        raise BadParams("adversarial_greedy needs distances")
    pos = list(init)
    out = []
    for _ in range(M):
        gap = dist[:, pos].min(axis=1)
        gap[pos] = -1.0
        far = np.flatnonzero(gap >= gap.max() - 1e-12)
        r = int(rng.choice(far))
        j = min(range(k), key=lambda j: (dist[pos[j], r], j))
        pos[j] = r
        out.append(r)
    return out


# experiments ------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Everything a report depends on.

    ``metric`` is either a path to a metric file or a generator spec
    ``{"kind": ..., "n": ..., "params": {...}, "seed": ...}``.  A fixed
    ``requests`` list overrides the generator.
    """

    metric: dict[str, Any] | str
    k: int
    sigma: float = 8.0
    reduce: bool = True
    mode: str = "weighted"
    generator: str = "uniform_random"
    M: int = 20
    seed: int = 0
    repetitions: int = 1
    rounding_samples: int = 10
    zipf_s: float = 1.1
    initial: list[int] | None = None
    requests: list[int] | None = None
    csv_path: str | None = None
    json_path: str | None = None
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.M < 0:
            raise BadParams("M must be >= 0")
        if self.repetitions < 1:
            raise BadParams("repetitions must be >= 1")
        if self.rounding_samples < 1:
            raise BadParams("rounding_samples must be >= 1")
        if self.mode == "exact" and self.reduce:
            # depth reduction breaks the exact level structure
            raise BadParams("exact mode needs reduce=False")

    def load_metric(self) -> FiniteMetric:
        if isinstance(self.metric, str):
            return load_metric(self.metric)
        spec = dict(self.metric)
        return generate_metric(spec["kind"], int(spec["n"]), spec.get("params"), int(spec.get("seed", 0)))

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise BadParams(f"unknown config keys: {sorted(extra)}")
        return cls(**doc)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    rows: list[dict[str, Any]] = field(default_factory=list)
    traces: list[dict[str, Any]] = field(default_factory=list)

    @property
    def all_certified(self) -> bool:
        return all(r["cert_passed"] and r["violations"] == 0 for r in self.rows)

    def summary(self) -> dict[str, Any]:
        def stat(key: str) -> dict[str, float]:
            vals = np.array([r[key] for r in self.rows if r[key] is not None and not r["trivial"]], dtype=float)
            if vals.size == 0:
                return {"mean": math.nan, "se": math.nan, "max": math.nan}
            se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
            return {"mean": float(vals.mean()), "se": se, "max": float(vals.max())}

        return {
            "runs": len(self.rows),
            "trivial": sum(bool(r["trivial"]) for r in self.rows),
            "all_certified": self.all_certified,
            "ratio_pd": stat("ratio_pd"),
            "ratio_tree": stat("ratio_tree"),
            "ratio_metric": stat("ratio_metric"),
            "c_probe": stat("c_probe"),
        }

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=COLUMNS)
            w.writeheader()
            for row in self.rows:
                w.writerow(row)

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": asdict(self.config),
            "rows": self.rows,
            "summary": self.summary(),
            "traces": self.traces,
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, default=_jsonable))


def _jsonable(x: Any) -> Any:
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _stage(name: str, fn: Callable[[], Any]) -> Any:
    try:
        return fn()
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _mean_se(vals: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(vals, dtype=float)
    se = float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else 0.0
    return float(a.mean()), se


def _ratio(cost: float, opt: float) -> float | None:
    return cost / opt if opt > 0 else None


def run_once(cfg: ExperimentConfig, seed: int) -> tuple[dict[str, Any], dict[str, Any]]:
    """One report row and its trace document."""
    m = _stage("metric", cfg.load_metric)
    init = list(range(cfg.k)) if cfg.initial is None else list(cfg.initial)
    tree = _stage("embed", lambda: frt_embed(m, cfg.sigma, seed))
    if cfg.reduce:
        tree = _stage("reduce", lambda: reduce_depth(tree))
    if cfg.requests is not None:
        reqs = [int(r) for r in cfg.requests]
    else:
        reqs = _stage(
            "requests",
            lambda: generate_requests(cfg.generator, m, cfg.k, cfg.M, seed, initial=init, s=cfg.zipf_s),
        )
    start = _stage("serve", lambda: init_state(tree, cfg.k, init, cfg.mode))
    run = _stage("serve", lambda: serve_sequence(start, reqs))
    rep = _stage("certify", lambda: certify_run(start, run.traces))
    u_hist = u_history_of(start, run.traces)
    cfg0 = ServerConfiguration.of(init)

    def rounding() -> tuple[list[float], list[float]]:
        tree_c, met_c = [], []
        for j in range(cfg.rounding_samples):
            rr = run_rounded(u_hist, cfg0, seed * 1_000_003 + j, tree, reqs)
            tree_c.append(rr.cost)
            met_c.append(metric_cost(rr.configs, m.dist))
        return tree_c, met_c

    tree_c, met_c = _stage("round", rounding)
    opt_tree = _stage("opt", lambda: opt_min_cost_flow(tree_metric(tree), init, reqs).cost)
    opt_met = _stage("opt", lambda: opt_min_cost_flow(m, init, reqs).cost)
    rt, rt_se = _mean_se(tree_c)
    rm, rm_se = _mean_se(met_c)
    trivial = opt_met <= 0 or opt_tree <= 0
    row = {
        "seed": seed,
        "n": m.n,
        "k": cfg.k,
        "M": len(reqs),
        "mode": cfg.mode,
        "depth": tree.height,
        "frac_cost": rep.primal,
        "frac_emd": rep.costs["emd"],
        "dual": rep.dual,
        "bound": rep.cert.bound,
        "ratio_pd": rep.cert.ratio,
        "cert_passed": rep.cert.passed,
        "violations": len(rep.primal_violations) + len(rep.dual_violations),
        "rounded_tree_mean": rt,
        "rounded_tree_se": rt_se,
        "rounded_metric_mean": rm,
        "rounded_metric_se": rm_se,
        "c_probe": rt / rep.costs["emd"] if rep.costs["emd"] > 0 else None,
        "opt_tree": opt_tree,
        "opt_metric": opt_met,
        "ratio_tree": None if trivial else _ratio(rt, opt_tree),
        "ratio_metric": None if trivial else _ratio(rm, opt_met),
        "trivial": trivial,
    }
    trace = {
        "seed": seed,
        "requests": reqs,
        "tree_depth": tree.height,
        "certification": rep.to_dict(),
        "serves": [
            {
                "request": tr.request,
                "delta_a": tr.delta_a,
                "primal_cost": tr.primal_cost,
                "dual_profit": tr.dual_profit,
                "events": [list(e) for e in tr.events],
                "leaf_u": tr.leaf_u_after.tolist(),
            }
            for tr in run.traces
        ],
    }
    return row, trace


def _run_seed(args: tuple[ExperimentConfig, int]) -> tuple[dict[str, Any], dict[str, Any]]:
    return run_once(*args)


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Run ``cfg.repetitions`` seeds; rows are ordered by seed."""
    seeds = [cfg.seed + i for i in range(cfg.repetitions)]
    jobs = [(cfg, s) for s in seeds]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as ex:
            results = list(ex.map(_run_seed, jobs))
    else:
        results = [_run_seed(j) for j in jobs]
    report = ExperimentReport(cfg, [r for r, _ in results], [t for _, t in results])
    if cfg.csv_path:
        report.write_csv(cfg.csv_path)
    if cfg.json_path:
        report.write_json(cfg.json_path)
    return report
