"""Embedding-space geometry: prototypes, nearest-prototype rule, risk and radius."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegeneratePrototypesError, DomainError, MissingSupportError, ShapeError

DUPLICATE_TOL = 1e-12


@dataclass(frozen=True)
class PrototypeSet:
    prototypes: np.ndarray  # (K, d)
    class_ids: tuple
    support_counts: tuple

    def __post_init__(self):
        P = np.asarray(self.prototypes, dtype=np.float64)
        if P.ndim != 2 or P.shape[0] != len(self.class_ids):
            raise ShapeError(f"prototypes {P.shape} do not match {len(self.class_ids)} class ids")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ShapeError("class ids must be distinct")
        norms = np.linalg.norm(P, axis=1)
        if np.any(norms > 1.0 + 1e-9):
            raise ShapeError(f"prototype norm {norms.max()!r} exceeds 1")
        for i in range(len(P)):
            for j in range(i + 1, len(P)):
                if np.linalg.norm(P[i] - P[j]) <= DUPLICATE_TOL:
                    raise DegeneratePrototypesError(
                        f"prototypes of classes {self.class_ids[i]!r} and {self.class_ids[j]!r} coincide"
                    )
        object.__setattr__(self, "prototypes", P)

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def __len__(self):
        return len(self.class_ids)

    def vector(self, class_id) -> np.ndarray:
        return self.prototypes[self.class_ids.index(class_id)]

    @classmethod
    def from_mapping(cls, mapping: dict, counts: dict | None = None) -> "PrototypeSet":
        ids = tuple(sorted(mapping))
        counts = counts or {}
        return cls(np.array([mapping[k] for k in ids], dtype=np.float64), ids,
                   tuple(int(counts.get(k, 1)) for k in ids))


def compute_prototypes(embeddings, labels: Sequence, class_ids: Sequence | None = None) -> PrototypeSet:
    """Class prototype = arithmetic mean of that class's support embeddings."""
    E = np.asarray(embeddings, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] != len(labels):
        raise ShapeError(f"{E.shape[0] if E.ndim else 0} embeddings for {len(labels)} labels")
    ids = tuple(sorted(set(labels))) if class_ids is None else tuple(class_ids)
    labels = np.asarray(labels)
    protos, counts = [], []
    for k in ids:
        members = E[labels == k]
        if len(members) == 0:
            raise MissingSupportError(f"class {k!r} has no support embeddings")
        protos.append(members.mean(axis=0))
        counts.append(len(members))
    return PrototypeSet(np.array(protos), ids, tuple(counts))


def distances(point, protos: PrototypeSet) -> np.ndarray:
    point = np.asarray(point, dtype=np.float64)
    if point.shape != (protos.dim,):
        raise ShapeError(f"point shape {point.shape} != ({protos.dim},)")
    return np.linalg.norm(protos.prototypes - point, axis=1)


def classify(point, protos: PrototypeSet):
    """Nearest prototype in l2; exact ties go to the smallest class id."""
    d = distances(point, protos)
    best = d.min()
    return min(k for k, v in zip(protos.class_ids, d) if v == best)


def two_nearest(point, protos: PrototypeSet):
    d = distances(point, protos)
    order = sorted(range(len(d)), key=lambda i: (d[i], protos.class_ids[i]))
    return protos.class_ids[order[0]], protos.class_ids[order[1]]


def embedding_risk(point, c1, c2) -> float:
    """Signed l2 distance from ``point`` to the bisector hyperplane of c1 and c2.

    Positive when the point is closer to c1.
    """
    point, c1, c2 = (np.asarray(v, dtype=np.float64) for v in (point, c1, c2))
    sep = float(np.linalg.norm(c2 - c1))
    if sep <= DUPLICATE_TOL:
        raise DegeneratePrototypesError("c1 and c2 coincide; risk undefined")
    return (float(np.sum((c2 - point) ** 2)) - float(np.sum((c1 - point) ** 2))) / (2.0 * sep)


def embedding_risk_batch(points, c1, c2) -> np.ndarray:
    """Row-wise ``embedding_risk``, written in the affine form (no ||p||^2 terms)."""
    c1 = np.asarray(c1, dtype=np.float64)
    c2 = np.asarray(c2, dtype=np.float64)
    sep = float(np.linalg.norm(c2 - c1))
    if sep <= DUPLICATE_TOL:
        raise DegeneratePrototypesError("c1 and c2 coincide; risk undefined")
    offset = float(c2 @ c2) - float(c1 @ c1)
    return (offset - 2.0 * (np.asarray(points) @ (c2 - c1))) / (2.0 * sep)


def lipschitz_constant(sigma: float) -> float:
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma!r}")
    return math.sqrt(2.0 / (math.pi * sigma * sigma))


def certified_radius(gamma: float, sigma: float) -> float:
    return max(0.0, gamma) / lipschitz_constant(sigma)
