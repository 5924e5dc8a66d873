import math

import numpy as np
import pytest

from protosmooth import (
    ABSTAIN,
    CircleModel,
    ConstantModel,
    PrototypeSet,
    SmoothingConfig,
    StepModel,
    certify,
    closest_prototype,
    distance_interval,
    embedding_risk,
    embedding_risk_lower_bound,
    failure_probabilities,
    hoeffding_halfwidth,
    smoothed_oracle,
)
from protosmooth import NoiseStream, mean_embedding, paired_square_estimate
from protosmooth.certification import risk_lower_bound
from protosmooth.errors import DomainError, InsufficientDataError
from protosmooth.smoothing import PairedSquareObservation, SmoothedEstimate

E1, E2 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])


def two_protos(a=E1, b=E2):
    return PrototypeSet(np.array([a, b]), (1, 2), (1, 1))


def obs(values, weight=1):
    return [PairedSquareObservation(v, 0, (2 * i, 2 * i + 1), weight) for i, v in enumerate(values)]


def test_halfwidth_examples():
    assert hoeffding_halfwidth(1000, 4, 0.001 / 3) == pytest.approx(4 * math.sqrt(math.log(6000) / 2000))
    assert hoeffding_halfwidth(1000, 4, 0.001 / 3) == pytest.approx(0.26381, abs=5e-6)
    assert hoeffding_halfwidth(17, 0, 0.1) == 0.0
    assert hoeffding_halfwidth(400, 2, 0.01) == pytest.approx(2 * hoeffding_halfwidth(1600, 2, 0.01), rel=1e-15)


@pytest.mark.parametrize("level", [0.0, 1.0, -0.5, 2.0])
def test_halfwidth_rejects_level(level):
    with pytest.raises(DomainError):
        hoeffding_halfwidth(10, 1, level)


def test_distance_interval_constant():
    for m in (1, 7, 50):
        t = hoeffding_halfwidth(m, 5, 0.001 / 3)
        ci = distance_interval(obs([1.0] * m), 0.001)
        assert (ci.lower, ci.upper) == (math.sqrt(max(0, 1 - t)), math.sqrt(1 + t))
        assert ci.level == 0.001 / 3


def test_distance_interval_width4_and_clamp():
    t = hoeffding_halfwidth(10, 4, 0.01 / 3)
    ci = distance_interval(obs([0.5] * 10), 0.01, range_mode="paper")
    assert ci.upper == math.sqrt(0.5 + t)
    assert ci.lower == 0.0 and t > 0.5
    with pytest.raises(InsufficientDataError):
        distance_interval([], 0.01)


def test_distance_interval_weighted_count():
    # one observation carrying 1000 samples counts as 1000
    ci = distance_interval(obs([1.0], weight=1000), 0.001, "paper")
    assert ci.upper == math.sqrt(1 + hoeffding_halfwidth(1000, 4, 0.001 / 3))


def test_distance_interval_converges():
    w, x, sigma = np.array([0.7, 0.2]), np.array([0.3, -0.1]), 1.0
    model = CircleModel(w)
    c = np.array([0.0, 0.6])
    truth = float(np.linalg.norm(smoothed_oracle(model, x, sigma) - c))
    stream = NoiseStream(0, sigma, 2)
    o = [paired_square_estimate(mean_embedding(model, x, stream, 2 * i, 1),
                                mean_embedding(model, x, stream, 2 * i + 1, 1), c)
         for i in range(10**5)]
    ci = distance_interval(o, 0.001)
    assert ci.lower <= truth <= ci.upper
    assert ci.upper - ci.lower < 0.1


def test_closest_constant_model_first_iteration():
    model = ConstantModel(E1, 4)
    cfg = SmoothingConfig()
    res = closest_prototype(model, np.zeros(4), two_protos(), cfg)
    assert res.label == 1 and res.samples_used == 2 * cfg.n0 and len(res.estimates) == 2


def test_closest_forced_tie_abstains():
    model = StepModel(3)
    cfg = SmoothingConfig(max_samples=20_000)
    res = closest_prototype(model, np.zeros(3), two_protos(E1[:2], E2[:2]), cfg)
    assert res.abstained
    # iterations of 2*1000, 2*2000, ... until the next would exceed the cap
    assert res.samples_used == 2 * 1000 * (1 + 2 + 3 + 4) <= cfg.max_samples


def test_closest_step_model_matches_oracle():
    sigma = 1.0
    model = StepModel(3)
    x = np.array([2 * sigma, 0.0, 0.0])
    protos = two_protos(E1[:2], E2[:2])
    g = smoothed_oracle(model, x, sigma)
    assert np.linalg.norm(g - E1[:2]) < np.linalg.norm(g - E2[:2])
    assert closest_prototype(model, x, protos, SmoothingConfig(sigma=sigma)).label == 1


def test_closest_single_candidate():
    res = closest_prototype(ConstantModel(E1, 2), np.zeros(2), two_protos(), SmoothingConfig(),
                            exclude=1, start=77)
    assert (res.label, res.samples_used, res.next_index, res.estimates) == (2, 0, 77, [])


def test_constant_model_certificate():
    cfg = SmoothingConfig(sigma=1.0)
    res = certify(ConstantModel(E1, 4), np.zeros(4), two_protos(), cfg)
    gamma = 2 / (2 * math.sqrt(2))
    t = 2 * math.sqrt(math.log(2 / cfg.alpha) / (2 * 2000))
    assert res.prediction == 1 and res.runner_up == 2 and not res.abstained
    assert res.samples_used == 2000
    assert res.gamma_lower == pytest.approx(gamma - t, abs=1e-12)
    assert res.gamma_lower == pytest.approx(0.619924, abs=1e-6)
    assert res.radius == pytest.approx((gamma - t) / 0.797885, rel=1e-6)


def test_abstain_certificate():
    res = certify(StepModel(3), np.zeros(3), two_protos(E1[:2], E2[:2]), SmoothingConfig(max_samples=4000))
    assert res.abstained and res.prediction == ABSTAIN and res.radius == 0.0


def test_negative_gamma_clamps_radius(monkeypatch):
    from protosmooth import certification
    from protosmooth.certification import RiskBound

    monkeypatch.setattr(certification, "embedding_risk_lower_bound",
                        lambda *a, **k: RiskBound(1, 2, -0.25, 2, [], 6000))
    res = certify(ConstantModel(E1, 2), np.zeros(2), two_protos(), SmoothingConfig())
    assert (res.prediction, res.gamma_lower, res.radius, res.abstained) == (1, -0.25, 0.0, False)


def test_risk_bound_requires_two_classes():
    one = PrototypeSet(np.array([E1]), (1,), (1,))
    with pytest.raises(DomainError):
        embedding_risk_lower_bound(ConstantModel(E1, 2), np.zeros(2), one, SmoothingConfig())


def test_gamma_observation_range_and_affinity(rng):
    a, b = rng.normal(size=3), rng.normal(size=3)
    a, b = 0.8 * a / np.linalg.norm(a), 0.6 * b / np.linalg.norm(b)
    pts = rng.normal(size=(500, 3))
    pts /= np.maximum(1, np.linalg.norm(pts, axis=1))[:, None]
    est = [SmoothedEstimate(p, 1, i, i) for i, p in enumerate(pts)]
    gammas = np.array([embedding_risk(p, a, b) for p in pts])
    assert gammas.max() - gammas.min() <= 2.0
    direct = gammas.mean() - hoeffding_halfwidth(len(pts), 2, 0.01)
    assert risk_lower_bound(est, a, b, 0.01) == pytest.approx(direct, abs=1e-12)


def test_risk_bound_takes_worst_competitor():
    # runner-up 1 is nearer, but the bisector with class 2 is closer to g
    protos = PrototypeSet(np.array([[0.9, -0.25], [0.7, -0.7], [0.1, 0.2]]), (0, 1, 2), (1, 1, 1))
    g = np.array([1.0, 0.0])
    bound = embedding_risk_lower_bound(ConstantModel(g, 2), np.zeros(2), protos, SmoothingConfig())
    gamma_to = {k: embedding_risk(g, protos.vector(0), protos.vector(k)) for k in (1, 2)}
    assert (bound.closest, bound.runner_up, bound.binding) == (0, 1, 2)
    assert gamma_to[2] < gamma_to[1]
    t = hoeffding_halfwidth(bound.samples_used, 2, 0.001)
    assert bound.gamma_lower == pytest.approx(gamma_to[2] - t, abs=1e-12)


def test_certify_deterministic_and_worker_independent():
    model = CircleModel(np.array([1.0, -0.5, 0.25]))
    protos = PrototypeSet(np.array([[0.6, 0.0], [-0.6, 0.0]]), (0, 1), (1, 1))
    x = np.array([0.1, 0.2, 0.0])
    base = SmoothingConfig(seed=9)
    r1 = certify(model, x, protos, base)
    r2 = certify(model, x, protos, base.with_(workers=8))
    assert (r1.prediction, r1.gamma_lower, r1.samples_used) == (r2.prediction, r2.gamma_lower, r2.samples_used)


def test_circle_closest_soundness_small():
    sigma = 1.0
    model = CircleModel(np.array([0.8, 0.3]))
    protos = PrototypeSet(np.array([[0.5, 0.0], [0.0, 0.5], [-0.5, 0.0]]), (0, 1, 2), (1, 1, 1))
    wrong = 0
    for trial in range(100):
        x = np.random.default_rng(trial).normal(size=2)
        g = smoothed_oracle(model, x, sigma)
        d = np.linalg.norm(protos.prototypes - g, axis=1)
        res = closest_prototype(model, x, protos, SmoothingConfig(seed=trial, max_samples=40_000))
        if not res.abstained and res.label != int(np.argmin(d)):
            wrong += 1
    assert wrong == 0


def test_failure_probabilities():
    assert failure_probabilities(5, 1e-3) == (5e-3, 5.995e-3)
    q1, q2 = failure_probabilities(3, 1e-12)
    assert q1 < 1e-11 and q2 < 1e-11
    for K, a in [(2, 0.1), (5, 0.3), (10, 0.1)]:
        q1, q2 = failure_probabilities(K, a)
        assert q2 - q1 == pytest.approx(a * (1 - K * a))
    with pytest.raises(DomainError):
        failure_probabilities(0, 0.1)


def test_config_invariants():
    for kw in (dict(sigma=0), dict(alpha=1.0), dict(n0=1), dict(n0=100, max_samples=150),
               dict(range_mode="loose")):
        with pytest.raises(DomainError):
            SmoothingConfig(**kw)
