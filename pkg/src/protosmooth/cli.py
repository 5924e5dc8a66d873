"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data validation error, 3 internal
invariant violation.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys

import numpy as np

from . import __version__
from .certification import SmoothingConfig
from .embedding import MlpSpec, NoiseAugmentation, load_model, save_model, train_mlp
from .episodes import ClusterSpec, episode_stream, generate_episode, load_embedding_table, load_episode, save_episode
from .errors import DataError, InvariantError, ProtosmoothError
from .geometry import PrototypeSet
from .harness import (
    abstain_rate,
    abstain_table,
    certified_accuracy,
    certify_points,
    compare_curves,
    episode_prototypes,
    read_results,
    results_to_csv,
    sample_size_histogram,
    timing_report,
)

log = logging.getLogger("protosmooth")

EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text):
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text):
    return [int(float(t)) for t in text.split(",") if t.strip()]


def parse_grid(text: str):
    """'start:stop:step' (inclusive) or a comma-separated list."""
    if ":" in text:
        start, stop, step = (float(t) for t in text.split(":"))
        if step <= 0:
            raise argparse.ArgumentTypeError("grid step must be positive")
        count = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(count)]
    return _floats(text)


def _num(v) -> str:
    return repr(float(v))


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _emit(args, text: str) -> None:
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _cfg(args) -> SmoothingConfig:
    return SmoothingConfig(sigma=args.sigma, n0=args.n0, max_samples=args.max_samples, alpha=args.alpha,
                           seed=args.seed, range_mode=args.range_mode)


def _cluster(args, seed) -> ClusterSpec:
    return ClusterSpec(args.n_way, args.shots, args.queries, args.input_dim, args.center_spread,
                       args.within_std, seed)


def _read_prototypes(path) -> PrototypeSet:
    protos = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            try:
                protos[int(tokens[0])] = [float(t) for t in tokens[1:]]
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path} line {lineno}: {exc}") from None
    return PrototypeSet.from_mapping(protos)


def _read_labels(path):
    labels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                pid, label = line.split()
                labels[pid] = int(label)
            except ValueError as exc:
                raise DataError(f"{path} line {lineno}: {exc}") from None
    return labels


def _task(args):
    """(model, points, labels, protos, point_ids) from either an episode or an embedding table."""
    if getattr(args, "table", None):
        if not (args.prototypes and args.labels):
            raise DataError("--table needs --prototypes and --labels")
        model = load_embedding_table(args.table)
        labels = _read_labels(args.labels)
        ids = list(labels)
        missing = [p for p in ids if p not in model.table]
        if missing:
            raise DataError(f"point {missing[0]} has no rows in {args.table}")
        return model, ids, [labels[p] for p in ids], _read_prototypes(args.prototypes), ids
    if not (args.model and args.episode):
        raise DataError("need --model and --episode (or --table/--prototypes/--labels)")
    model = load_model(args.model)
    ep = load_episode(args.episode)
    qx, qy = ep.query_arrays()
    return model, list(qx), qy.tolist(), episode_prototypes(model, ep), None


def _results(args, cfg):
    if getattr(args, "results", None):
        return read_results(args.results)
    model, points, labels, protos, ids = _task(args)
    return certify_points(model, points, labels, protos, cfg, args.workers, ids,
                          record_time=getattr(args, "record_time", False))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_episode(args):
    ep = generate_episode(_cluster(args, args.seed))
    if args.out in (None, "-"):
        raise DataError("gen-episode needs --out")
    save_episode(ep, args.out)


def cmd_train(args):
    layers = _ints(args.layers)
    if layers[0] != args.input_dim:
        raise DataError(f"first layer {layers[0]} must equal --input-dim {args.input_dim}")
    model = train_mlp(MlpSpec(layers), episode_stream(_cluster(args, args.seed)), args.lr, args.steps,
                      NoiseAugmentation(args.noise_sigma, args.noise_prob), seed=args.seed)
    if args.out in (None, "-"):
        raise DataError("train needs --out")
    save_model(model, args.out)


def cmd_certify(args):
    rows = _results(args, _cfg(args))
    _emit(args, results_to_csv(rows))


def cmd_curve(args):
    rows = _results(args, _cfg(args))
    curve = certified_accuracy(rows, args.grid)
    _emit(args, _csv(["epsilon", "certified_accuracy"], [(_num(e), _num(ca)) for e, ca in curve]))


def cmd_attack(args):
    cfg = _cfg(args)
    model = load_model(args.model)
    ep = load_episode(args.episode)
    qx, qy = ep.query_arrays()
    protos = episode_prototypes(model, ep)
    rows = read_results(args.results) if args.results else None
    grid, cols = compare_curves(model, list(qx), qy.tolist(), protos, cfg, args.grid, rows,
                                args.kinds, args.n_grad, args.steps, args.attack_seed, args.workers)
    names = {"certified": "certified_accuracy", "random": "random_plain",
             "fgsm": "fgsm_smoothed", "pgd": "pgd_smoothed"}
    header = ["epsilon"] + [names[k] for k in cols]
    table = [[_num(e)] + [_num(cols[k][i]) for k in cols] for i, e in enumerate(grid)]
    _emit(args, _csv(header, table))


def cmd_timing(args):
    model, points, labels, protos, _ = _task(args)
    rows = timing_report(model, points, labels, protos, _cfg(args), args.n_values)
    _emit(args, _csv(["n", "mean_seconds", "std_seconds", "mean_samples_used"],
                     [(n, "%.6f" % m, "%.6f" % s, _num(k)) for n, m, s, k in rows]))


def cmd_hist(args):
    rows = _results(args, _cfg(args))
    hist = sample_size_histogram(rows, args.buckets)
    _emit(args, _csv(["bucket_lo", "bucket_hi", "count"],
                     [(lo, "inf" if hi == float("inf") else hi, c) for lo, hi, c in hist]))


def cmd_report(args):
    if args.kind == "gnuplot":
        if not args.input:
            raise DataError("report --kind gnuplot needs --input")
        with open(args.input, newline="", encoding="utf-8") as fh:
            table = list(csv.reader(fh))
        if not table:
            raise DataError(f"{args.input} is empty")
        lines = ["# " + " ".join(table[0])] + [" ".join(r) for r in table[1:]]
        _emit(args, "\n".join(lines) + "\n")
    elif args.kind == "abstain":
        model, points, labels, protos, ids = _task(args)
        rates = abstain_table(model, points, labels, protos, _cfg(args), args.alphas, args.workers)
        _emit(args, _csv(["setting"] + ["alpha=%g" % a for a, _ in rates],
                         [[args.name] + ["%.4f" % r for _, r in rates]]))
    else:
        rows = _results(args, _cfg(args))
        n = len(rows)
        ca = certified_accuracy(rows, [0.0])[0][1]
        stats = [("points", n),
                 ("accuracy", _num(sum(r.correct for r in rows) / n)),
                 ("abstain_rate", _num(abstain_rate(rows))),
                 ("certified_accuracy_at_0", _num(ca)),
                 ("mean_radius", _num(np.mean([r.radius for r in rows]))),
                 ("mean_samples_used", _num(np.mean([r.samples_used for r in rows])))]
        _emit(args, _csv(["statistic", "value"], stats))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _shared(p):
    g = p.add_argument_group("smoothing")
    g.add_argument("--sigma", type=float, default=1.0)
    g.add_argument("--alpha", type=float, default=0.001)
    g.add_argument("--n0", type=int, default=1000, help="batch size per iteration")
    g.add_argument("--max-samples", type=int, default=500_000, help="noise-draw cap T per search")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--range-mode", choices=["sound", "paper"], default="sound")
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--out", default=None)


def _task_args(p, results=True):
    p.add_argument("--model")
    p.add_argument("--episode")
    p.add_argument("--table", help="embedding table (point_id noise_index v1..vd)")
    p.add_argument("--prototypes", help="prototype file (class_id v1..vd per line)")
    p.add_argument("--labels", help="label file (point_id label per line)")
    if results:
        p.add_argument("--results", help="reuse a results CSV instead of certifying")


def _cluster_args(p):
    p.add_argument("--n-way", type=int, default=2)
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--queries", type=int, default=10, help="query points per class")
    p.add_argument("--input-dim", type=int, default=32)
    p.add_argument("--center-spread", type=float, default=2.0)
    p.add_argument("--within-std", type=float, default=0.5)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="protosmooth", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-episode", help="write a synthetic Gaussian-cluster episode")
    _cluster_args(p)
    _shared(p)
    p.set_defaults(func=cmd_gen_episode)

    p = sub.add_parser("train", help="train a normalized MLP on synthetic episodes")
    _cluster_args(p)
    p.add_argument("--layers", default="32,64,16")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--noise-sigma", type=float, default=1.0)
    p.add_argument("--noise-prob", type=float, default=0.3)
    _shared(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("certify", help="certify query points, write the results CSV")
    _task_args(p, results=False)
    p.add_argument("--record-time", action="store_true", help="fill wall_ms (otherwise 0)")
    _shared(p)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("curve", help="certified accuracy over an epsilon grid")
    _task_args(p)
    p.add_argument("--grid", type=parse_grid, default=parse_grid("0:3:0.25"))
    _shared(p)
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("attack", help="certified vs empirical robust accuracy")
    p.add_argument("--model", required=True)
    p.add_argument("--episode", required=True)
    p.add_argument("--results")
    p.add_argument("--grid", type=parse_grid, default=parse_grid("0:2:0.25"))
    p.add_argument("--kinds", type=lambda s: [k for k in s.split(",") if k], default=["random", "fgsm", "pgd"])
    p.add_argument("--n-grad", type=int, default=1000)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--attack-seed", type=int, default=0)
    _shared(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("timing", help="per-point certification time versus n")
    _task_args(p, results=False)
    p.add_argument("--n-values", type=_ints, default=[1000, 10000])
    _shared(p)
    p.set_defaults(func=cmd_timing)

    p = sub.add_parser("hist", help="histogram of samples used per point")
    _task_args(p)
    p.add_argument("--buckets", type=_ints, default=[0, 5000, 10000, 20000, 50000, 100000])
    _shared(p)
    p.set_defaults(func=cmd_hist)

    p = sub.add_parser("report", help="summaries, abstain tables, gnuplot layouts")
    p.add_argument("--kind", choices=["summary", "abstain", "gnuplot"], default="summary")
    _task_args(p)
    p.add_argument("--input", help="CSV to convert (gnuplot)")
    p.add_argument("--alphas", type=_floats, default=[1e-2, 1e-3, 1e-4])
    p.add_argument("--name", default="episode", help="row label for the abstain table")
    _shared(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except InvariantError as exc:
        log.error("invariant violated: %s", exc)
        return EXIT_INVARIANT
    except (DataError, ProtosmoothError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
