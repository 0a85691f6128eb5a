"""``adamshap`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Failures print one line ``error: <kind>: <message>`` on stderr.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checks import oracle_check
from .config import EXPERIMENTS, ConfigError, parse_config
from .data import KINDS, gen_data, write_csv

log = logging.getLogger("adamshap")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: usage: {message}", file=sys.stderr)
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="adamshap", description="Adam-aware In-Run Data Shapley experiments.")
    p.add_argument("-q", "--quiet", action="store_true", help="only print warnings")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="write a synthetic CSV dataset")
    g.add_argument("--kind", choices=KINDS, default="gaussian_mixture")
    g.add_argument("--n", type=int, default=2000, help="training rows")
    g.add_argument("--d", type=int, default=10, help="feature count")
    g.add_argument("--flip-fraction", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-val", type=int, default=200)
    g.add_argument("--n-test", type=int, default=500)
    g.add_argument("--class-sep", type=float, default=2.0)
    g.add_argument("--feature-scale-ratio", type=float, default=1.0,
                   help="scale of the first feature over that of the last")
    g.add_argument("--n-informative", type=int, default=0,
                   help="features carrying the class offset (0 = all)")
    g.add_argument("--out", required=True, type=Path)

    for name in EXPERIMENTS:
        e = sub.add_parser(name, help=f"run the {name} experiment")
        e.add_argument("--config", required=True, type=Path)

    o = sub.add_parser("oracle-check", help="run the exhaustive-Shapley and ghost suites")
    o.add_argument("--batch", type=int, default=6)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--instances", type=int, default=20)
    return p


def _summary(name, result):
    """Short human-readable result lines printed after the report paths."""
    if name == "fidelity":
        for method, r in result.reports.items():
            yield f"{method}: pearson={r.pearson_r:.4f} spearman={r.spearman_rho:.4f} n={r.n}"
    elif name == "lr-sweep":
        for eta, method, pr, sr in result.rows:
            yield f"eta={eta:g} {method}: pearson={pr:.4f} spearman={sr:.4f}"
    elif name == "optimizer-dependence":
        for triple, comp, pr, sr in result.summary:
            yield f"triple {triple} {comp}: pearson={pr:.4f} spearman={sr:.4f}"
    elif name == "pruning":
        ratios = sorted({r[0] for r in result.rows})
        for ratio in ratios:
            accs = " ".join(f"{s}={result.mean_accuracy(ratio, s):.4f}"
                            for s in ("bottom", "random", "top"))
            yield f"ratio={ratio:g} {accs}"
        yield f"flipped labels in bottom 20%: {result.flipped_in_bottom(0.2):.3f}"
    elif name == "efficiency":
        for mode, B, sps, peak in result.rows:
            yield f"{mode} B={B}: sps={sps:.1f} peak_extra_bytes={peak}"
    elif name == "diagnostics":
        r = result.stress
        yield f"stress window: pearson={r.pearson_r:.4f} spearman={r.spearman_rho:.4f} n={r.n}"


def _paths(result):
    if getattr(result, "path", None) is not None:
        return [result.path]
    return list(getattr(result, "paths", ()))


def _run_experiment(name, args):
    from .experiments import run_experiment

    cfg = parse_config(args.config)
    if cfg.name != name:
        log.info("config names experiment %r; running %r", cfg.name, name)
        cfg = cfg.replace(name=name)
    result = run_experiment(cfg)
    for path in _paths(result):
        print(path)
    for line in _summary(name, result):
        print(line)
    return 0


def _oracle_check(args):
    results = oracle_check(args.batch, args.seed, args.instances)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def _gen_data(args):
    ds = gen_data(args.kind, args.n, args.d, args.flip_fraction, args.seed, args.n_val,
                  args.n_test, args.class_sep, args.feature_scale_ratio, args.n_informative)
    print(write_csv(ds, args.out))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "gen-data":
            return _gen_data(args)
        if args.command == "oracle-check":
            return _oracle_check(args)
        return _run_experiment(args.command, args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        kind = "usage" if args.command in ("gen-data", "oracle-check") else "runtime"
        print(f"error: {kind}: {exc}", file=sys.stderr)
        return 2 if kind == "usage" else 1
    except Exception as exc:  # noqa: BLE001 - the CLI contract is a one-line error
        print(f"error: runtime: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
