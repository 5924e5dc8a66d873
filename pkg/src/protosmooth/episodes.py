"""Synthetic few-shot episodes, episode files and embedding tables."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .embedding import FILE_NORM_TOL, FileBackedModel, loads_json
from .errors import DomainError, ParseError, SchemaError, ValidationError

EPISODE_FORMAT = "protosmooth.episode"
EPISODE_VERSION = 1


@dataclass(frozen=True)
class ClusterSpec:
    n_way: int = 2
    shots: int = 1
    queries_per_class: int = 10
    input_dim: int = 32
    center_spread: float = 2.0
    within_std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_way < 1 or self.shots < 1 or self.queries_per_class < 0 or self.input_dim < 1:
            raise DomainError("n_way, shots, input_dim must be >= 1 and queries_per_class >= 0")
        if not self.center_spread > 0 or self.within_std < 0:
            raise DomainError("center_spread must be > 0 and within_std >= 0")


@dataclass
class Episode:
    input_dim: int
    n_way: int
    shots: int
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.support_x = np.asarray(self.support_x, dtype=np.float64).reshape(-1, self.input_dim)
        self.query_x = np.asarray(self.query_x, dtype=np.float64).reshape(-1, self.input_dim)
        self.support_y = np.asarray(self.support_y, dtype=np.int64)
        self.query_y = np.asarray(self.query_y, dtype=np.int64)
        validate_episode(self)

    def support_arrays(self):
        return self.support_x, self.support_y

    def query_arrays(self):
        return self.query_x, self.query_y

    @property
    def classes(self):
        return sorted(set(self.support_y.tolist()))

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            (self.input_dim, self.n_way, self.shots, self.seed)
            == (other.input_dim, other.n_way, other.shots, other.seed)
            and all(np.array_equal(a, b) for a, b in zip(
                (self.support_x, self.support_y, self.query_x, self.query_y),
                (other.support_x, other.support_y, other.query_x, other.query_y)))
        )


def validate_episode(ep: Episode) -> None:
    if len(ep.support_x) != len(ep.support_y) or len(ep.query_x) != len(ep.query_y):
        raise SchemaError("point and label counts differ")
    labels, counts = np.unique(ep.support_y, return_counts=True)
    if len(labels) != ep.n_way:
        raise SchemaError(f"support covers {len(labels)} classes, episode declares n_way={ep.n_way}")
    uneven = [int(k) for k, c in zip(labels, counts) if c != ep.shots]
    if uneven:
        raise SchemaError(f"class {uneven[0]} does not have exactly {ep.shots} support points")
    missing = sorted(set(ep.query_y.tolist()) - set(labels.tolist()))
    if missing:
        raise SchemaError(f"query label {missing[0]} absent from support")
    for name, arr in (("support", ep.support_x), ("query", ep.query_x)):
        if not np.all(np.isfinite(arr)):
            raise SchemaError(f"{name} points contain non-finite values")


def generate_episode(spec: ClusterSpec) -> Episode:
    rng = np.random.default_rng(spec.seed)
    centers = rng.normal(0.0, spec.center_spread, size=(spec.n_way, spec.input_dim))

    def around(count):
        pts = centers[:, None, :] + spec.within_std * rng.standard_normal(
            (spec.n_way, count, spec.input_dim))
        labels = np.repeat(np.arange(spec.n_way), count)
        return pts.reshape(-1, spec.input_dim), labels

    sx, sy = around(spec.shots)
    qx, qy = around(spec.queries_per_class)
    return Episode(spec.input_dim, spec.n_way, spec.shots, sx, sy, qx, qy, spec.seed)


def episode_stream(spec: ClusterSpec) -> Iterator[Episode]:
    """Endless episodes; episode i uses seed (spec.seed, i)."""
    i = 0
    while True:
        seed = int(np.random.SeedSequence([spec.seed, i]).generate_state(1, np.uint64)[0])
        yield generate_episode(ClusterSpec(spec.n_way, spec.shots, spec.queries_per_class,
                                           spec.input_dim, spec.center_spread, spec.within_std, seed))
        i += 1


def _fmt(v) -> str:
    return " ".join("%.17g" % c for c in v)


def episode_to_dict(ep: Episode) -> dict:
    return {
        "format": EPISODE_FORMAT,
        "version": EPISODE_VERSION,
        "input_dim": ep.input_dim,
        "n_way": ep.n_way,
        "shots": ep.shots,
        "seed": ep.seed,
        "support": [{"label": int(k), "x": _fmt(x)} for x, k in zip(ep.support_x, ep.support_y)],
        "query": [{"label": int(k), "x": _fmt(x)} for x, k in zip(ep.query_x, ep.query_y)],
    }


def episode_from_dict(doc) -> Episode:
    if not isinstance(doc, dict) or doc.get("format") != EPISODE_FORMAT:
        raise SchemaError(f"not a {EPISODE_FORMAT} document")
    if doc.get("version") != EPISODE_VERSION:
        raise SchemaError(f"unsupported episode version {doc.get('version')!r}")
    try:
        dim = int(doc["input_dim"])
        points = {}
        for part in ("support", "query"):
            xs, ys = [], []
            for i, rec in enumerate(doc[part]):
                x = [float(t) for t in rec["x"].split()]
                if len(x) != dim:
                    raise SchemaError(f"{part}[{i}] has {len(x)} coordinates, expected {dim}")
                xs.append(x)
                ys.append(int(rec["label"]))
            points[part] = (np.array(xs).reshape(-1, dim), np.array(ys, dtype=np.int64))
        return Episode(dim, int(doc["n_way"]), int(doc["shots"]), *points["support"], *points["query"],
                       doc.get("seed"))
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError(f"malformed episode: {exc!r}") from None


def save_episode(ep: Episode, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(episode_to_dict(ep), fh, indent=1)
        fh.write("\n")


def load_episode(path) -> Episode:
    with open(path, "r", encoding="utf-8") as fh:
        return episode_from_dict(loads_json(fh.read()))


# ---------------------------------------------------------------------------
# embedding tables: one "point_id noise_index v1 ... vd" record per line
# ---------------------------------------------------------------------------

def load_embedding_table(path) -> FileBackedModel:
    rows: dict = {}
    dim = None
    with open(path, "rb") as fh:
        offset = 0
        for lineno, raw in enumerate(fh, 1):
            line = raw.decode("utf-8").strip()
            start = offset
            offset += len(raw)
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            try:
                pid, idx = tokens[0], int(tokens[1])
                vec = np.array([float(t) for t in tokens[2:]])
            except (IndexError, ValueError) as exc:
                raise ParseError(f"line {lineno}: {exc}", start) from None
            if dim is None:
                dim = len(vec)
            if len(vec) != dim or dim == 0:
                raise SchemaError(f"line {lineno}: {len(vec)} components, expected {dim}")
            norm = math.sqrt(float(vec @ vec))
            if abs(norm - 1.0) > FILE_NORM_TOL:
                raise ValidationError(
                    f"line {lineno} (point {pid}, noise index {idx}): norm {norm!r} is not 1")
            per_point = rows.setdefault(pid, {})
            if idx in per_point:
                raise ValidationError(f"line {lineno}: duplicate key (point {pid}, noise index {idx})")
            per_point[idx] = vec
    if not rows:
        raise ValidationError(f"{path}: embedding table is empty")
    table = {}
    for pid, per_point in rows.items():
        expected = set(range(len(per_point)))
        if set(per_point) != expected:
            gap = min(set(range(max(per_point) + 1)) - set(per_point))
            raise ValidationError(f"point {pid}: noise index {gap} missing")
        table[pid] = np.array([per_point[i] for i in range(len(per_point))])
    return FileBackedModel(table, dim)


def write_embedding_table(path, model, points, stream_for, n_indices: int) -> None:
    """Record f(x + eps_i), i < n_indices, for each (point_id, x) in ``points``.

    ``stream_for(point_id)`` must return the NoiseStream certification would use.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for pid, x in points:
            stream = stream_for(pid)
            for lo in range(0, n_indices, 4096):
                m = min(4096, n_indices - lo)
                emb = model.noisy_embeddings(x, stream, lo, m)
                for i, v in enumerate(emb):
                    fh.write(f"{pid} {lo + i} {_fmt(v)}\n")
