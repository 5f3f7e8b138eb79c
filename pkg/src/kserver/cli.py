"""Command line entry point: ``kserver <verb> ...``.

Exit status is 0 on success, 1 when a certificate fails and 2 when a
stage raises.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .baselines import BASELINES
from .bench import GENERATORS, ExperimentConfig, generate_requests, run_experiment
from .certificates import certify_run, u_history_of
from .errors import KServerError, StageError
from .fractional import MODES, init_state, serve_sequence
from .hst import frt_embed, load_tree, reduce_depth, save_tree, tree_from_dict, tree_metric, tree_to_dict, verify_hst
from .metric import KINDS, FiniteMetric, generate_metric, load_metric
from .offline import opt_brute_force, opt_min_cost_flow
from .rounding import ServerConfiguration, metric_cost, run_rounded

EXIT_OK, EXIT_CERT, EXIT_STAGE = 0, 1, 2


def _ints(text: str) -> list[int]:
    text = text.strip()
    if not text:
        return []
    if Path(text).is_file():
        text = Path(text).read_text()
        if text.lstrip().startswith("["):
            return [int(x) for x in json.loads(text)]
    return [int(x) for x in text.replace(",", " ").split()]


def _emit(doc: Any, out: str | None) -> None:
    text = json.dumps(doc, indent=2, default=_plain)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _plain(x: Any) -> Any:
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _metric(args: argparse.Namespace) -> FiniteMetric:
    if args.metric:
        return load_metric(args.metric)
    if args.kind:
        return generate_metric(args.kind, args.n, None, args.metric_seed)
    raise KServerError("give --metric PATH or --kind KIND --n N")


def _requests(args: argparse.Namespace, n: int, k: int, initial: list[int], dist=None) -> list[int]:
    if args.requests is not None:
        return _ints(args.requests)
    return generate_requests(args.generator, dist if dist is not None else n, k, args.M, args.seed, initial=initial)


def _initial(args: argparse.Namespace, k: int) -> list[int]:
    return _ints(args.initial) if args.initial else list(range(k))


def _metric_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--metric", help="metric file (JSON)")
    p.add_argument("--kind", choices=KINDS, help="generate a metric instead of reading one")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--metric-seed", type=int, default=0)


def _request_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--initial", "--init", dest="initial", help="initial server points, comma separated (default 0..k-1)")
    p.add_argument("--requests", help="request points, comma separated, or a file")
    p.add_argument("--generator", choices=GENERATORS, default="uniform_random")
    p.add_argument("--M", type=int, default=20, help="number of generated requests")


# verbs ---------------------------------------------------------------------------------


def cmd_embed(args: argparse.Namespace) -> int:
    m = _metric(args)
    t = frt_embed(m, args.sigma, args.seed)
    if args.out:
        save_tree(t, args.out)
    doc = {"n": t.n, "depth": t.height, "report": t.report}
    if not args.out:
        doc["tree"] = tree_to_dict(t)
    _emit(doc, None)
    return EXIT_OK


def cmd_reduce(args: argparse.Namespace) -> int:
    t = reduce_depth(load_tree(args.tree))
    if args.out:
        save_tree(t, args.out)
    rep = verify_hst(t)
    doc = {"report": t.report, "structure_violations": sorted(rep.props())}
    if not args.out:
        doc["tree"] = tree_to_dict(t)
    _emit(doc, None)
    return EXIT_OK


def _serve_doc(tree, k: int, mode: str, initial: list[int], requests: list[int]) -> dict[str, Any]:
    start = init_state(tree, k, initial, mode)
    run = serve_sequence(start, requests)
    return {
        "tree": tree_to_dict(tree),
        "k": k,
        "mode": mode,
        "initial": initial,
        "requests": requests,
        "primal": run.primal,
        "dual": run.dual,
        "u_history": [u.tolist() for u in u_history_of(start, run.traces)],
        "serves": [
            {
                "request": tr.request,
                "delta_a": tr.delta_a,
                "primal_cost": tr.primal_cost,
                "dual_profit": tr.dual_profit,
                "events": [list(e) for e in tr.events],
                "residuals": {
                    "identity": tr.residuals.identity,
                    "relation": tr.residuals.relation,
                    "steps": tr.residuals.steps,
                },
            }
            for tr in run.traces
        ],
    }


def cmd_serve(args: argparse.Namespace) -> int:
    tree = load_tree(args.tree)
    k = args.k
    init = _initial(args, k)
    reqs = _requests(args, tree.n, k, init, tree.distance_matrix())
    _emit(_serve_doc(tree, k, args.mode, init, reqs), args.out)
    return EXIT_OK


def cmd_certify(args: argparse.Namespace) -> int:
    doc = json.loads(Path(args.trace).read_text())
    tree = tree_from_dict(doc["tree"])
    # the serve is deterministic, so replaying it recovers the full ledger
    start = init_state(tree, doc["k"], doc["initial"], doc["mode"])
    run = serve_sequence(start, doc["requests"])
    replay = u_history_of(start, run.traces)
    drift = max(
        (float(np.max(np.abs(np.asarray(a) - b))) for a, b in zip(doc["u_history"], replay)),
        default=0.0,
    )
    rep = certify_run(start, run.traces)
    out = rep.to_dict()
    out["replay_drift"] = drift
    _emit(out, args.out)
    ok = rep.cert.passed and rep.feasible
    return EXIT_OK if ok else EXIT_CERT


def cmd_round(args: argparse.Namespace) -> int:
    doc = json.loads(Path(args.trace).read_text())
    tree = tree_from_dict(doc["tree"])
    hist = [np.asarray(u) for u in doc["u_history"]]
    init = ServerConfiguration.of(doc["initial"])
    dist = tree.distance_matrix()
    runs = []
    for j in range(args.samples):
        rr = run_rounded(hist, init, args.seed + j, tree, doc["requests"])
        runs.append(
            {
                "seed": args.seed + j,
                "cost": rr.cost,
                "check_cost": metric_cost(rr.configs, dist),
                "final": list(rr.configs[-1].sorted()),
            }
        )
    costs = np.array([r["cost"] for r in runs])
    se = float(costs.std(ddof=1) / np.sqrt(len(costs))) if len(costs) > 1 else 0.0
    summary = {"fractional": doc["primal"], "mean": float(costs.mean()), "se": se}
    if args.out and args.out.endswith(".csv"):
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "cost", "check_cost"])
            for r in runs:
                w.writerow([r["seed"], r["cost"], r["check_cost"]])
        _emit(summary, None)
    else:
        _emit({**summary, "runs": runs}, args.out)
    return EXIT_OK


def cmd_opt(args: argparse.Namespace) -> int:
    m = tree_metric(load_tree(args.tree)) if args.tree else _metric(args)
    k = args.k
    init = _initial(args, k)
    reqs = _requests(args, m.n, k, init, m.dist)
    solver = opt_brute_force if args.method == "dp" else opt_min_cost_flow
    sol = solver(m, init, reqs)
    _emit({"cost": sol.cost, "requests": reqs, "schedule": [list(s) for s in sol.schedule]}, args.out)
    return EXIT_OK


def cmd_baseline(args: argparse.Namespace) -> int:
    m = tree_metric(load_tree(args.tree)) if args.tree else _metric(args)
    k = args.k
    init = _initial(args, k)
    reqs = _requests(args, m.n, k, init, m.dist)
    run = BASELINES[args.algorithm](m, init, reqs)
    _emit({"algorithm": run.algorithm, "total": run.total, "costs": run.costs, "final": list(run.final)}, args.out)
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    doc: dict[str, Any] = json.loads(Path(args.config).read_text()) if args.config else {}
    for key in ("seed", "sigma", "k"):
        val = getattr(args, key)
        if val is not None and key in args.explicit:
            doc[key] = val
    if args.out:
        doc["csv_path"] = args.out
    if args.json:
        doc["json_path"] = args.json
    if "metric" not in doc:
        doc["metric"] = {"kind": args.kind or "random_euclidean", "n": args.n, "seed": args.metric_seed}
    doc.setdefault("k", args.k)
    cfg = ExperimentConfig.from_dict(doc)
    rep = run_experiment(cfg)
    _emit(rep.summary(), None)
    return EXIT_OK if rep.all_certified else EXIT_CERT


VERBS = {
    "embed": cmd_embed,
    "reduce": cmd_reduce,
    "serve": cmd_serve,
    "certify": cmd_certify,
    "round": cmd_round,
    "opt": cmd_opt,
    "baseline": cmd_baseline,
    "bench": cmd_bench,
}


class _Track(argparse.Action):
    """Store the value and remember that it was given explicitly."""

    def __call__(self, parser, ns, values, option_string=None):
        setattr(ns, self.dest, values)
        ns.explicit = getattr(ns, "explicit", set()) | {self.dest}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, action=_Track)
    common.add_argument("--sigma", type=float, default=8.0, action=_Track)
    common.add_argument("--k", type=int, default=2, action=_Track)
    common.add_argument("--out", help="output path (default: stdout)")
    common.add_argument("--config", help="JSON file whose keys provide defaults for the flags")

    ap = argparse.ArgumentParser(prog="kserver", description="Online k-server on trees and HSTs.")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("embed", parents=[common], help="random HST embedding of a metric")
    _metric_args(p)

    p = sub.add_parser("reduce", parents=[common], help="depth reduction of an HST")
    p.add_argument("--tree", required=True)

    p = sub.add_parser("serve", parents=[common], help="run the fractional algorithm")
    p.add_argument("--tree", required=True)
    p.add_argument("--mode", choices=MODES, default="weighted")
    _request_args(p)

    p = sub.add_parser("certify", parents=[common], help="LP checks and ratio certificate of a serve trace")
    p.add_argument("--trace", required=True)

    p = sub.add_parser("round", parents=[common], help="randomized rounding of a serve trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--samples", "--seeds", dest="samples", type=int, default=10)

    p = sub.add_parser("opt", parents=[common], help="offline optimum")
    _metric_args(p)
    p.add_argument("--tree", help="use the leaf metric of this HST")
    p.add_argument("--method", choices=("flow", "dp"), default="flow")
    _request_args(p)

    p = sub.add_parser("baseline", parents=[common], help="classical online algorithms")
    _metric_args(p)
    p.add_argument("--tree", help="use the leaf metric of this HST")
    p.add_argument("--algorithm", "--algo", dest="algorithm", choices=sorted(BASELINES), default="wfa")
    _request_args(p)

    p = sub.add_parser("bench", parents=[common], help="end-to-end experiment; --out takes the CSV path")
    _metric_args(p)
    p.add_argument("--json", help="full report with traces")
    return ap


def _apply_config(ap: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = ap.parse_args(argv)
    args.explicit = getattr(args, "explicit", set())
    if args.config and args.verb != "bench":
        doc = json.loads(Path(args.config).read_text())
        for key, val in doc.items():
            dest = key.replace("-", "_")
            if dest not in args.explicit and hasattr(args, dest):
                if isinstance(val, list):
                    val = ",".join(str(v) for v in val)
                setattr(args, dest, val)
    return args


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    args = _apply_config(ap, list(sys.argv[1:] if argv is None else argv))
    try:
        return VERBS[args.verb](args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (KServerError, ValueError, OSError, AssertionError) as exc:
        print(f"error: {args.verb}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
