import numpy as np
import pytest

from protosmooth import CircleModel, ConstantModel, PrototypeSet, SmoothingConfig, classify, smoothed_oracle
from protosmooth.attack import (
    AttackConfig,
    empirical_robust_accuracy,
    fgsm_attack,
    pgd_attack,
    random_attack,
    robust_curve,
)
from protosmooth.episodes import FileBackedModel
from protosmooth.errors import DomainError, NotDifferentiableError
from protosmooth.harness import episode_prototypes

CIRCLE_PROTOS = PrototypeSet(np.array([[0.5, 0.0], [0.0, 0.5], [-0.5, 0.0]]), (0, 1, 2), (1, 1, 1))


def margin(g, protos, a, b):
    """How much closer g is to c_a than to c_b, in squared distance."""
    return float(np.sum((g - protos.vector(b)) ** 2) - np.sum((g - protos.vector(a)) ** 2))


def test_random_attack_norm_and_seed(rng):
    x = rng.normal(size=7)
    assert np.array_equal(random_attack(x, 0.0, 1), x)
    for eps in (0.1, 1.0, 3.7):
        assert abs(np.linalg.norm(random_attack(x, eps, 5) - x) - eps) <= 1e-12
    d1, d2 = random_attack(x, 1.0, 1) - x, random_attack(x, 1.0, 2) - x
    assert not np.allclose(d1, d2)
    assert np.array_equal(random_attack(x, 1.0, 1), random_attack(x, 1.0, 1))
    with pytest.raises(DomainError):
        random_attack(x, -1.0, 0)


def test_gradient_attack_budgets(toy_model, toy_episode):
    protos = episode_prototypes(toy_model, toy_episode)
    qx, _ = toy_episode.query_arrays()
    for i, eps in enumerate((0.05, 0.5, 2.0)):
        x = qx[i]
        adv = fgsm_attack(toy_model, x, protos, 1.0, 200, eps, 3)
        assert abs(np.linalg.norm(adv - x) - eps) <= 1e-9
        adv = pgd_attack(toy_model, x, protos, 1.0, 200, eps, 7, 3)
        assert np.linalg.norm(adv - x) <= eps + 1e-9


def test_pgd_one_step_is_fgsm(toy_model, toy_episode):
    protos = episode_prototypes(toy_model, toy_episode)
    x = toy_episode.query_x[3]
    assert np.array_equal(pgd_attack(toy_model, x, protos, 1.0, 300, 0.4, 1, 11),
                          fgsm_attack(toy_model, x, protos, 1.0, 300, 0.4, 11))


def test_attack_determinism(toy_model, toy_episode):
    protos = episode_prototypes(toy_model, toy_episode)
    x = toy_episode.query_x[5]
    assert np.array_equal(pgd_attack(toy_model, x, protos, 1.0, 100, 0.3, 5, 2),
                          pgd_attack(toy_model, x, protos, 1.0, 100, 0.3, 5, 2))
    assert not np.array_equal(fgsm_attack(toy_model, x, protos, 1.0, 100, 0.3, 2),
                              fgsm_attack(toy_model, x, protos, 1.0, 100, 0.3, 3))


def test_constant_model_unchanged():
    model = ConstantModel(np.array([1.0, 0.0]), 4)
    protos = PrototypeSet(np.array([[1.0, 0.0], [0.0, 1.0]]), (0, 1), (1, 1))
    x = np.arange(4.0)
    assert np.array_equal(fgsm_attack(model, x, protos, 1.0, 50, 0.5, 0), x)
    assert np.array_equal(pgd_attack(model, x, protos, 1.0, 50, 0.5, 4, 0), x)


def test_file_backed_model_not_attackable():
    model = FileBackedModel({"0": np.array([[1.0, 0.0]])}, 2)
    protos = PrototypeSet(np.array([[1.0, 0.0], [0.0, 1.0]]), (0, 1), (1, 1))
    with pytest.raises(NotDifferentiableError):
        fgsm_attack(model, "0", protos, 1.0, 1, 0.1, 0)


def test_fgsm_decreases_circle_margin():
    sigma = 1.0
    model = CircleModel(np.array([0.9, -0.4, 0.3]))
    improved = 0
    for trial in range(100):
        x = np.random.default_rng(trial).normal(size=3)
        g = smoothed_oracle(model, x, sigma)
        d = np.linalg.norm(CIRCLE_PROTOS.prototypes - g, axis=1)
        a, b = (CIRCLE_PROTOS.class_ids[i] for i in np.argsort(d)[:2])
        adv = fgsm_attack(model, x, CIRCLE_PROTOS, sigma, 1000, 0.1, trial)
        g_adv = smoothed_oracle(model, adv, sigma)
        improved += margin(g_adv, CIRCLE_PROTOS, a, b) <= margin(g, CIRCLE_PROTOS, a, b)
    assert improved >= 95


def test_pgd_at_least_as_strong_as_fgsm(toy_model, toy_episode):
    protos = episode_prototypes(toy_model, toy_episode)
    qx, qy = toy_episode.query_arrays()
    cfg = SmoothingConfig(max_samples=20_000)
    fgsm = robust_curve(toy_model, qx, qy, protos, cfg, "fgsm", [1.0], n_grad=200)
    pgd = robust_curve(toy_model, qx, qy, protos, cfg, "pgd", [1.0], n_grad=200, steps=10)
    assert pgd[0][1] <= fgsm[0][1]


def test_robust_curve_nested_and_monotone(toy_model, toy_episode):
    protos = episode_prototypes(toy_model, toy_episode)
    qx, qy = toy_episode.query_arrays()
    cfg = SmoothingConfig(max_samples=20_000)
    grid = [0.0, 0.5, 1.0, 1.5, 2.0]
    curve = robust_curve(toy_model, qx[::5], qy[::5], protos, cfg, "pgd", grid, n_grad=100, steps=5)
    accs = [a for _, a in curve]
    assert all(b <= a for a, b in zip(accs, accs[1:]))
    assert all(0 <= a <= 1 for a in accs)


def test_empirical_accuracy_zero_budget_is_clean(toy_model, toy_episode):
    protos = episode_prototypes(toy_model, toy_episode)
    qx, qy = toy_episode.query_arrays()
    clean = np.mean([classify(toy_model.embed(x), protos) == y for x, y in zip(qx, qy)])
    acc = empirical_robust_accuracy(toy_model, qx, qy, protos, AttackConfig("random", 0.0), "plain",
                                    SmoothingConfig())
    assert acc == clean
    assert robust_curve(toy_model, qx, qy, protos, SmoothingConfig(), "random", [], "plain") == []


def test_attack_config_validation():
    for kw in (dict(kind="cw"), dict(epsilon=-1.0), dict(steps=0), dict(n_grad=0)):
        with pytest.raises(DomainError):
            AttackConfig(**kw)
