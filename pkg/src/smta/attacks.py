"""Gradient-ascent attack steps and feasible-set projections.

Implements IFGSM and PGD under L-inf / L2 norm budgets together with the
valid-image box constraint. Every iterate applies, in fixed order:
ascent step -> norm-ball projection -> box clamp. The box clamp includes a
float repair so that re-adding the original input always lands inside the
box exactly, not just up to a rounding ulp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward

IFGSM = "ifgsm"
PGD = "pgd"


@dataclass(frozen=True)
class AttackConfig:
    algorithm: str = PGD
    norm: float = math.inf
    epsilon: float = 8.0 / 255.0
    steps: int = 20
    step_size: float | None = None  # defaults to 2.5 * epsilon / steps
    random_init: bool = False
    box: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        if self.algorithm not in (IFGSM, PGD):
            raise ValueError(f"unknown attack algorithm {self.algorithm!r}")
        if self.algorithm == IFGSM and (self.norm != math.inf or self.random_init):
            raise ValueError("ifgsm implies the L-inf norm and no random init")
        if self.norm not in (math.inf, 2.0):
            raise ValueError(f"norm must be inf or 2, got {self.norm}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        lo, hi = self.box
        if not lo < hi:
            raise ValueError(f"box requires lo < hi, got ({lo}, {hi})")

    @property
    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / self.steps


@dataclass
class AttackState:
    x_orig: np.ndarray
    delta: np.ndarray
    iteration: int = 0
    loss_trace: list[float] = field(default_factory=list)
    max_norm: float = 0.0
    max_box_excess: float = 0.0
    delta_trace: list[np.ndarray] = field(default_factory=list)


def project_linf(delta: np.ndarray, epsilon: float) -> np.ndarray:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return np.clip(delta, -epsilon, epsilon)


def project_l2(delta: np.ndarray, epsilon: float) -> np.ndarray:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    norm = float(np.linalg.norm(delta))
    if norm <= epsilon:
        return delta
    return delta * (epsilon / norm)


def clamp_box(x_orig: np.ndarray, delta: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Shrink delta so that x_orig + delta lies in [lo, hi], exactly."""
    if not lo < hi:
        raise ValueError(f"box requires lo < hi, got ({lo}, {hi})")
    delta = np.clip(x_orig + delta, lo, hi) - x_orig
    # float repair: the subtraction above can leave x+delta one rounding ulp
    # outside the box; nudge offending coordinates (always toward x, so norms
    # only shrink) until the fresh sum is inside.
    for _ in range(10):
        v = x_orig + delta
        over = v > hi
        under = v < lo
        if not over.any() and not under.any():
            return delta
        delta = delta.copy()
        delta[over] = np.nextafter(delta[over], -np.inf)
        delta[under] = np.nextafter(delta[under], np.inf)
    raise RuntimeError("box clamp failed to converge")  # pragma: no cover


def ascent_step_linf(x_orig, delta, grad, step_size, epsilon, lo, hi) -> np.ndarray:
    """delta + a * sign(grad), then L-inf projection and box clamp."""
    delta = delta + step_size * np.sign(grad)
    return clamp_box(x_orig, project_linf(delta, epsilon), lo, hi)


def ascent_step_l2(x_orig, delta, grad, step_size, epsilon, lo, hi) -> np.ndarray:
    """delta + a * grad / max(|grad|_2, 1e-12), then L2 projection and box clamp."""
    delta = delta + step_size * grad / max(float(np.linalg.norm(grad)), 1e-12)
    return clamp_box(x_orig, project_l2(delta, epsilon), lo, hi)


def init_perturbation(cfg: AttackConfig, x_orig: np.ndarray, seed: int = 0) -> np.ndarray:
    """Zeros, or one uniform draw from the epsilon ball when random_init is set."""
    if not cfg.random_init:
        return np.zeros_like(x_orig)
    rng = np.random.default_rng(seed)
    if cfg.norm == math.inf:
        delta = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x_orig.shape)
    else:
        direction = rng.normal(size=x_orig.shape)
        direction /= max(float(np.linalg.norm(direction)), 1e-12)
        radius = cfg.epsilon * rng.random() ** (1.0 / x_orig.size)
        delta = radius * direction
    return clamp_box(x_orig, delta, *cfg.box)


def delta_norm(delta: np.ndarray, norm: float) -> float:
    if norm == math.inf:
        return float(np.abs(delta).max())
    return float(np.linalg.norm(delta))


def box_excess(x_orig: np.ndarray, delta: np.ndarray, lo: float, hi: float) -> float:
    v = x_orig + delta
    return max(0.0, float((v - hi).max()), float((lo - v).max()))


def run_attack(model, sample, loss_fn, cfg: AttackConfig, seed: int = 0,
               record_deltas: bool = False) -> AttackState:
    """Iterate cfg.steps ascent steps on the loss provided by loss_fn.

    loss_fn is called with the perturbed input tensor and returns the scalar
    objective to ascend; it may adjust its internal weighting between calls.
    Feasibility (norm and box) is re-measured from scratch after every step
    and the running maxima are kept on the returned state.
    """
    if not model.frozen:
        raise ValueError("attacks require a frozen model")
    x_orig = sample.image
    lo, hi = cfg.box
    a = cfg.resolved_step_size
    state = AttackState(x_orig=x_orig, delta=init_perturbation(cfg, x_orig, seed))
    state.max_norm = delta_norm(state.delta, cfg.norm)
    state.max_box_excess = box_excess(x_orig, state.delta, lo, hi)
    if record_deltas:
        state.delta_trace.append(state.delta.copy())

    for step in range(cfg.steps):
        d = Tensor(state.delta, requires_grad=True)
        loss = loss_fn(Tensor(x_orig) + d)
        value = loss.item()
        if not np.isfinite(value):
            raise RuntimeError(f"non-finite loss at attack step {step + 1} of {cfg.steps}")
        state.loss_trace.append(value)
        grad = backward(loss).get(d)
        if grad is None:
            grad = np.zeros_like(state.delta)
        if cfg.norm == math.inf:
            state.delta = ascent_step_linf(x_orig, state.delta, grad, a, cfg.epsilon, lo, hi)
        else:
            state.delta = ascent_step_l2(x_orig, state.delta, grad, a, cfg.epsilon, lo, hi)
        state.iteration = step + 1
        state.max_norm = max(state.max_norm, delta_norm(state.delta, cfg.norm))
        state.max_box_excess = max(state.max_box_excess, box_excess(x_orig, state.delta, lo, hi))
        if record_deltas:
            state.delta_trace.append(state.delta.copy())
    return state
