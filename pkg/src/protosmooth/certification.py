"""Hoeffding intervals, adaptive closest-prototype search, risk lower bound, certify."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DomainError, InsufficientDataError
from .geometry import PrototypeSet, certified_radius, embedding_risk_batch
from .smoothing import (
    NoiseStream,
    PairedSquareObservation,
    SmoothedEstimate,
    mean_embedding,
    paired_square_estimate,
)

ABSTAIN = -1

# width of the interval holding every paired observation <a - c, b - c>
RANGE_WIDTH = {"sound": 5.0, "paper": 4.0}
# width of the interval holding every risk observation (affine in a unit-ball point)
GAMMA_RANGE = 2.0


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float = 1.0
    n0: int = 1000
    max_samples: int = 500_000
    alpha: float = 0.001
    seed: int = 0
    range_mode: str = "sound"
    workers: int = 1

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError("sigma must be positive")
        if not 0 < self.alpha < 1:
            raise DomainError("alpha must lie in (0, 1)")
        if self.n0 < 2:
            raise DomainError("n0 must be >= 2")
        if self.max_samples < 2 * self.n0:
            raise DomainError("max_samples must be >= 2 * n0")
        if self.range_mode not in RANGE_WIDTH:
            raise DomainError(f"range_mode must be one of {sorted(RANGE_WIDTH)}")

    @property
    def range_width(self) -> float:
        return RANGE_WIDTH[self.range_mode]

    def stream(self, dim: int, stream_id: int = 0) -> NoiseStream:
        return NoiseStream(self.seed, self.sigma, dim, stream_id)

    def with_(self, **kw) -> "SmoothingConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    level: float


@dataclass
class ClosestResult:
    label: object
    estimates: list
    samples_used: int
    next_index: int
    intervals: dict = field(default_factory=dict)

    @property
    def abstained(self) -> bool:
        return self.label == ABSTAIN


@dataclass
class RiskBound:
    closest: object
    runner_up: object
    gamma_lower: float
    binding: object  # competitor class whose bound is smallest
    estimates: list
    samples_used: int

    @property
    def abstained(self) -> bool:
        return self.closest == ABSTAIN


@dataclass
class CertificationResult:
    prediction: object
    gamma_lower: float
    radius: float
    samples_used: int
    abstained: bool
    wall_time: float
    runner_up: object = None


def hoeffding_halfwidth(n_obs: float, range_width: float, level: float) -> float:
    """t with P(|mean - E mean| >= t) <= level for n_obs variables of common range width."""
    if not 0 < level < 1:
        raise DomainError(f"level must lie in (0, 1), got {level!r}")
    if n_obs < 1:
        raise DomainError("need at least one observation")
    return range_width * math.sqrt(math.log(2.0 / level) / (2.0 * n_obs))


def distance_interval(observations: Sequence[PairedSquareObservation], alpha: float,
                      range_mode: str = "sound") -> ConfidenceInterval:
    """Interval for ||g(x) - c|| from paired squared-distance observations.

    Observations are pooled weighted by their sample counts; the Hoeffding
    count is the total weight. Each interval spends alpha / 3.
    """
    if not observations:
        raise InsufficientDataError("no observations for distance interval")
    weights = np.array([o.weight for o in observations], dtype=np.float64)
    values = np.array([o.value for o in observations])
    count = float(weights.sum())
    mean = float(values @ weights) / count
    t = hoeffding_halfwidth(count, RANGE_WIDTH[range_mode], alpha / 3.0)
    return ConfidenceInterval(math.sqrt(max(0.0, mean - t)), math.sqrt(max(0.0, mean + t)), alpha / 3.0)


def closest_prototype(model, x, protos: PrototypeSet, cfg: SmoothingConfig, exclude=None,
                      stream: NoiseStream | None = None, start: int = 0) -> ClosestResult:
    """Adaptive search for the prototype nearest the smoothed embedding.

    Iteration j draws two fresh disjoint estimates of j * n0 samples each,
    adds one paired observation per class, and stops once the smallest
    upper bound sits strictly below every other class's lower bound. Returns
    ABSTAIN when the next iteration would take total draws past max_samples.
    """
    if stream is None:
        stream = cfg.stream(model.input_dim or 1)
    candidates = [k for k in protos.class_ids if k != exclude]
    if len(candidates) == 1:
        return ClosestResult(candidates[0], [], 0, start)
    vectors = {k: protos.vector(k) for k in candidates}
    obs = {k: [] for k in candidates}
    estimates = []
    index, drawn, n = start, 0, cfg.n0
    intervals = {}
    while drawn + 2 * n <= cfg.max_samples:
        a = mean_embedding(model, x, stream, index, n, cfg.workers)
        b = mean_embedding(model, x, stream, index + n, n, cfg.workers)
        index += 2 * n
        drawn += 2 * n
        estimates += [a, b]
        for k in candidates:
            obs[k].append(paired_square_estimate(a, b, vectors[k], k))
        intervals = {k: distance_interval(obs[k], cfg.alpha, cfg.range_mode) for k in candidates}
        best = min(candidates, key=lambda k: intervals[k].lower)
        rival = min(intervals[k].lower for k in candidates if k != best)
        if intervals[best].upper < rival:
            return ClosestResult(best, estimates, drawn, index, intervals)
        n += cfg.n0
    return ClosestResult(ABSTAIN, estimates, drawn, index, intervals)


def _pooled_mean(estimates: Sequence[SmoothedEstimate]):
    weights = np.array([e.n_samples for e in estimates], dtype=np.float64)
    means = np.array([e.mean for e in estimates])
    return means, weights


def risk_lower_bound(estimates: Sequence[SmoothedEstimate], c_a, c_b, alpha: float) -> float:
    """Lower confidence bound on the signed distance of g(x) to the (c_a, c_b) bisector.

    Each estimate's risk is affine in its mean, so the sample-weighted average
    over estimates equals the average over individual noise draws.
    """
    means, weights = _pooled_mean(estimates)
    gammas = embedding_risk_batch(means, c_a, c_b)
    count = float(weights.sum())
    return float(gammas @ weights) / count - hoeffding_halfwidth(count, GAMMA_RANGE, alpha)


def embedding_risk_lower_bound(model, x, protos: PrototypeSet, cfg: SmoothingConfig,
                               stream: NoiseStream | None = None):
    """Closest class A, runner-up B, and a lower bound on the embedding risk.

    ``closest`` is ABSTAIN if either closest-prototype search abstains.
    The bound is the minimum over all competitor classes k != A of the bound
    for the (A, k) bisector; with two classes that is exactly the (A, B) bound.
    """
    if len(protos) < 2:
        raise DomainError("certification needs at least two classes")
    if stream is None:
        stream = cfg.stream(model.input_dim or 1)
    first = closest_prototype(model, x, protos, cfg, stream=stream, start=0)
    if first.abstained:
        return RiskBound(ABSTAIN, ABSTAIN, math.nan, None, first.estimates, first.samples_used)
    second = closest_prototype(model, x, protos, cfg, exclude=first.label, stream=stream,
                               start=first.next_index)
    used = first.samples_used + second.samples_used
    pool = first.estimates + second.estimates
    if second.abstained:
        return RiskBound(ABSTAIN, ABSTAIN, math.nan, None, pool, used)
    c_a = protos.vector(first.label)
    bounds = {k: risk_lower_bound(pool, c_a, protos.vector(k), cfg.alpha)
              for k in protos.class_ids if k != first.label}
    binding = min(bounds, key=lambda k: (bounds[k], protos.class_ids.index(k)))
    return RiskBound(first.label, second.label, bounds[binding], binding, pool, used)


def certify(model, x, protos: PrototypeSet, cfg: SmoothingConfig, stream_id: int = 0) -> CertificationResult:
    t0 = time.perf_counter()
    stream = cfg.stream(model.input_dim or 1, stream_id)
    bound = embedding_risk_lower_bound(model, x, protos, cfg, stream)
    elapsed = time.perf_counter() - t0
    if bound.abstained:
        return CertificationResult(ABSTAIN, math.nan, 0.0, bound.samples_used, True, elapsed)
    return CertificationResult(
        bound.closest, bound.gamma_lower, certified_radius(bound.gamma_lower, cfg.sigma),
        bound.samples_used, False, elapsed, bound.runner_up,
    )


def failure_probabilities(K: int, alpha: float):
    """(q1, q2): failure bounds of the closest-prototype search and the risk bound."""
    if K < 1:
        raise DomainError("K must be >= 1")
    if not 0 < alpha < 1:
        raise DomainError("alpha must lie in (0, 1)")
    return K * alpha, alpha + K * alpha - K * alpha * alpha
