"""Evaluation surfaces: per-point certification, accuracy curves, timing, histograms."""
from __future__ import annotations

import csv
import io
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .attack import robust_curve
from .certification import ABSTAIN, SmoothingConfig, certify
from .errors import DomainError, InvariantError, ParseError, SchemaError
from .geometry import PrototypeSet, compute_prototypes

RESULTS_HEADER = ["point_id", "true_label", "prediction", "abstained", "gamma_lower",
                  "radius", "samples_used", "wall_ms"]


@dataclass
class PointResult:
    point_id: str
    true_label: int
    prediction: int
    abstained: bool
    gamma_lower: float
    radius: float
    samples_used: int
    wall_ms: float = 0.0

    @property
    def correct(self) -> bool:
        return not self.abstained and self.prediction == self.true_label


def episode_prototypes(model, episode) -> PrototypeSet:
    sx, sy = episode.support_arrays()
    return compute_prototypes(model.forward(sx), sy.tolist())


def certify_points(model, points, labels, protos: PrototypeSet, cfg: SmoothingConfig,
                   workers: int = 1, point_ids=None, record_time: bool = True):
    """Certify every point; point i draws noise from stream id ``point_ids[i]`` (default i).

    Output order follows input order for any ``workers``.
    """
    points = list(points)
    if point_ids is None:
        point_ids = list(range(len(points)))
    inner = cfg.with_(workers=1) if workers > 1 else cfg

    def run(i):
        pid = point_ids[i]
        sid = int(pid) if str(pid).isdigit() else i
        res = certify(model, points[i], protos, inner, stream_id=sid)
        return PointResult(str(pid), int(labels[i]), int(res.prediction), res.abstained,
                           res.gamma_lower, res.radius, res.samples_used,
                           res.wall_time * 1e3 if record_time else 0.0)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, range(len(points))))
    return [run(i) for i in range(len(points))]


def _num(v: float) -> str:
    return repr(float(v))


def results_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_HEADER)
    for r in rows:
        w.writerow([r.point_id, r.true_label, r.prediction, int(r.abstained), _num(r.gamma_lower),
                    _num(r.radius), r.samples_used, "%.3f" % r.wall_ms])
    return buf.getvalue()


def read_results(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RESULTS_HEADER:
            raise SchemaError(f"{path}: results header must be {','.join(RESULTS_HEADER)}")
        rows = []
        for lineno, rec in enumerate(reader, 2):
            try:
                pid, y, pred, ab, g, r, s, ms = rec
                rows.append(PointResult(pid, int(y), int(pred), bool(int(ab)), float(g), float(r),
                                        int(s), float(ms)))
            except ValueError as exc:
                raise ParseError(f"{path} line {lineno}: {exc}") from None
    return rows


def _check_grid(grid):
    grid = [float(e) for e in grid]
    if any(e < 0 for e in grid) or any(b < a for a, b in zip(grid, grid[1:])):
        raise DomainError("epsilon grid must be sorted ascending and non-negative")
    return grid


def certified_accuracy(rows, grid):
    """CA(eps) = fraction of points correctly classified with radius > eps."""
    grid = _check_grid(grid)
    if not rows:
        raise DomainError("empty test set")
    curve = [(eps, sum(1 for r in rows if r.correct and r.radius > eps) / len(rows)) for eps in grid]
    if any(b[1] > a[1] for a, b in zip(curve, curve[1:])):
        raise InvariantError("certified accuracy curve increased")
    return curve


def certified_accuracy_curve(model, points, labels, protos, cfg, grid, workers=1):
    rows = certify_points(model, points, labels, protos, cfg, workers, record_time=False)
    return certified_accuracy(rows, grid)


def abstain_rate(rows) -> float:
    if not rows:
        raise DomainError("empty test set")
    return sum(r.abstained for r in rows) / len(rows)


def abstain_table(model, points, labels, protos, cfg, alphas, workers=1):
    """[(alpha, abstain rate)] with one certification pass per alpha."""
    return [(a, abstain_rate(certify_points(model, points, labels, protos, cfg.with_(alpha=a),
                                            workers, record_time=False)))
            for a in alphas]


def timing_report(model, points, labels, protos, cfg, n_values):
    """Per-point certify wall time at each batch size n: [(n, mean s, std s, mean samples)].

    The sample cap is raised to keep the same number of allowed iterations.
    """
    out = []
    for n in n_values:
        run_cfg = cfg.with_(n0=n, max_samples=max(cfg.max_samples * n // cfg.n0, 2 * n))
        rows = certify_points(model, points, labels, protos, run_cfg, workers=1)
        secs = [r.wall_ms / 1e3 for r in rows]
        std = statistics.stdev(secs) if len(secs) > 1 else 0.0
        out.append((n, statistics.fmean(secs), std, statistics.fmean(r.samples_used for r in rows)))
    return out


def sample_size_histogram(rows, edges):
    """Counts of samples_used in [e_i, e_{i+1}); the last bucket is [e_k, inf)."""
    edges = [int(e) for e in edges]
    if not edges or any(b <= a for a, b in zip(edges, edges[1:])):
        raise DomainError("bucket edges must be strictly increasing")
    counts = [0] * len(edges)
    for r in rows:
        if r.samples_used < edges[0]:
            raise DomainError(f"samples_used {r.samples_used} below the first bucket edge")
        counts[int(np.searchsorted(edges, r.samples_used, side="right")) - 1] += 1
    if sum(counts) != len(rows):
        raise InvariantError("histogram lost points")
    uppers = edges[1:] + [math.inf]
    return [(lo, hi, c) for lo, hi, c in zip(edges, uppers, counts)]


def compare_curves(model, points, labels, protos, cfg, grid, rows=None, kinds=("random", "fgsm", "pgd"),
                   n_grad=1000, steps=20, seed=0, workers=1):
    """Per epsilon: certified accuracy plus empirical robust accuracy per attack.

    The random attack targets the plain model; FGSM and PGD target the smoothed one.
    """
    grid = _check_grid(grid)
    if rows is None:
        rows = certify_points(model, points, labels, protos, cfg, workers, record_time=False)
    columns = {"certified": [ca for _, ca in certified_accuracy(rows, grid)]}
    for kind in kinds:
        classifier = "plain" if kind == "random" else "smoothed"
        columns[kind] = [acc for _, acc in robust_curve(model, points, labels, protos, cfg, kind, grid,
                                                        classifier, n_grad, steps, seed)]
    return grid, columns
