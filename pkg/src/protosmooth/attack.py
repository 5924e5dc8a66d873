"""Empirical attacks: random l2 noise on the plain model, FGSM/PGD on the smoothed model.

The gradient attacks ascend the margin loss
``||g_hat - c_A||^2 - ||g_hat - c_B||^2`` where A is the class being attacked
and B the nearest other class. Its gradient in g_hat is ``2 (c_B - c_A)``, so the
input gradient is the mean over noise draws of ``J_f(x + eps)^T 2 (c_B - c_A)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .certification import ABSTAIN, SmoothingConfig, closest_prototype
from .errors import DomainError, NotDifferentiableError
from .geometry import PrototypeSet, classify
from .smoothing import NoiseStream

ATTACK_KINDS = ("random", "fgsm", "pgd")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 0.0
    steps: int = 20
    n_grad: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise DomainError(f"attack kind must be one of {ATTACK_KINDS}")
        if self.epsilon < 0:
            raise DomainError("epsilon must be >= 0")
        if self.steps < 1 or self.n_grad < 1:
            raise DomainError("steps and n_grad must be >= 1")


def random_attack(x, epsilon: float, seed) -> np.ndarray:
    if epsilon < 0:
        raise DomainError("epsilon must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0:
        return x.copy()
    direction = np.random.default_rng(seed).standard_normal(x.shape)
    return x + epsilon * direction / np.linalg.norm(direction)


def _scaled_sign(grad, budget):
    step = np.sign(grad)
    norm = np.linalg.norm(step)
    if norm == 0:
        return np.zeros_like(grad)
    return budget * step / norm


def _margin_step(model, x, protos: PrototypeSet, stream: NoiseStream, start: int, n_grad: int,
                 budget: float, target=None):
    """One signed-gradient step; returns (step, attacked class)."""
    X = x + stream.batch(start, n_grad)
    g_hat = model.forward(X).mean(axis=0)
    dist = np.linalg.norm(protos.prototypes - g_hat, axis=1)
    order = sorted(range(len(dist)), key=lambda i: (dist[i], i))
    if target is None:
        target = protos.class_ids[order[0]]
    rival = next(protos.class_ids[i] for i in order if protos.class_ids[i] != target)
    upstream = 2.0 * (protos.vector(rival) - protos.vector(target))
    grad = model.vjp(X, np.broadcast_to(upstream, (n_grad, upstream.size))).mean(axis=0)
    return _scaled_sign(grad, budget), target


def _check_differentiable(model):
    if not model.differentiable:
        raise NotDifferentiableError(f"cannot attack a {model.kind} model with gradients")


def fgsm_attack(model, x, protos: PrototypeSet, sigma: float, n_grad: int, epsilon: float, seed,
                stream_id: int = 0, target=None) -> np.ndarray:
    _check_differentiable(model)
    x = np.asarray(x, dtype=np.float64)
    stream = NoiseStream(seed, sigma, model.input_dim, stream_id)
    step, _ = _margin_step(model, x, protos, stream, 0, n_grad, epsilon, target)
    return x + step


def pgd_attack(model, x, protos: PrototypeSet, sigma: float, n_grad: int, epsilon: float, steps: int,
               seed, stream_id: int = 0, target=None, init=None) -> np.ndarray:
    """``steps`` signed steps of size epsilon/steps, projected onto the epsilon ball.

    ``init`` is a starting perturbation (projected first); step t uses noise
    indices [t * n_grad, (t + 1) * n_grad).
    """
    _check_differentiable(model)
    if steps < 1:
        raise DomainError("steps must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    stream = NoiseStream(seed, sigma, model.input_dim, stream_id)
    delta = np.zeros_like(x) if init is None else _project(np.asarray(init, dtype=np.float64), epsilon)
    for t in range(steps):
        step, target = _margin_step(model, x + delta, protos, stream, t * n_grad, n_grad,
                                    epsilon / steps, target)
        delta = _project(delta + step, epsilon)
    return x + delta


def _project(delta, radius):
    norm = np.linalg.norm(delta)
    if norm > radius:
        return delta * (radius / norm)
    return delta


# ---------------------------------------------------------------------------
# robust accuracy
# ---------------------------------------------------------------------------

def _predictor(model, protos, classifier, cfg):
    if classifier == "plain":
        return lambda x, i: classify(model.embed(x), protos)
    if classifier == "smoothed":
        def predict(x, i):
            stream = cfg.stream(model.input_dim, i)
            return closest_prototype(model, x, protos, cfg, stream=stream).label
        return predict
    raise DomainError(f"classifier must be 'plain' or 'smoothed', got {classifier!r}")


def robust_curve(model, X, y, protos: PrototypeSet, cfg: SmoothingConfig, kind: str, grid,
                 classifier: str = "smoothed", n_grad: int = 1000, steps: int = 20, seed: int = 0):
    """Empirical robust accuracy at every budget in ascending ``grid``.

    Budgets are nested per point: once an attack at some epsilon flips a point
    it stays broken at every larger epsilon (that perturbation is admissible
    there too), and PGD at the next budget starts from the previous
    perturbation. The curve is therefore nonincreasing by construction.
    """
    grid = [float(e) for e in grid]
    if any(b < a for a, b in zip(grid, grid[1:])) or any(e < 0 for e in grid):
        raise DomainError("epsilon grid must be ascending and non-negative")
    if kind not in ATTACK_KINDS:
        raise DomainError(f"attack kind must be one of {ATTACK_KINDS}")
    predict = _predictor(model, protos, classifier, cfg)
    survived = np.zeros(len(grid))
    for i, (x, label) in enumerate(zip(np.asarray(X, dtype=np.float64), y)):
        clean = predict(x, i)
        if clean == ABSTAIN or clean != label:
            continue
        broken = False
        delta = np.zeros_like(x)
        for j, eps in enumerate(grid):
            if not broken and eps > 0:
                if kind == "random":
                    x_adv = random_attack(x, eps, [seed, i, j])
                elif kind == "fgsm":
                    x_adv = fgsm_attack(model, x, protos, cfg.sigma, n_grad, eps, seed, i, target=clean)
                else:
                    x_adv = pgd_attack(model, x, protos, cfg.sigma, n_grad, eps, steps, seed, i,
                                       target=clean, init=delta)
                    delta = x_adv - x
                broken = predict(x_adv, i) != label
            if not broken:
                survived[j] += 1
    return [(eps, survived[j] / len(y)) for j, eps in enumerate(grid)]


def empirical_robust_accuracy(model, X, y, protos: PrototypeSet, attack: AttackConfig,
                              classifier: str, cfg: SmoothingConfig) -> float:
    if len(y) == 0:
        raise DomainError("empty point set")
    curve = robust_curve(model, X, y, protos, cfg, attack.kind, [attack.epsilon], classifier,
                         attack.n_grad, attack.steps, attack.seed)
    return curve[0][1]
