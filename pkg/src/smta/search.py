"""Stealthy multi-task attack search: signed loss weighting and weight adaptation.

The attack maximizes a weighted sum of per-task losses in which the targeted
task carries weight +1 and every other task a non-positive weight. Three ways
to pick the non-targeted weights:

  NonStealthy - all zero; the plain targeted attack, collateral damage allowed.
  Manual      - fixed weights, found beforehand by a geometric magnitude scan
                on a calibration split (manual_search).
  Auto        - per-sample dynamic weights: after every attack step, each
                non-targeted weight moves by -step_size * (adversarial loss -
                clean reference loss), and its step size decays by the
                attenuation coefficient whenever that task's constraint holds.

A result is stealthy when every non-targeted adversarial loss is <= its clean
reference, compared exactly, with no tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, run_attack
from .autodiff import Tensor
from .tasks import MetricValue, metric_improved_or_equal, task_loss, task_metric


@dataclass(frozen=True)
class WeightVector:
    """Per-task loss weights: positive on the target, non-positive elsewhere."""

    target: int
    weights: tuple[float, ...]

    def __post_init__(self):
        if not 0 <= self.target < len(self.weights):
            raise ValueError(f"target {self.target} out of range for {len(self.weights)} tasks")
        if self.weights[self.target] <= 0:
            raise ValueError("targeted task weight must be positive")
        for i, w in enumerate(self.weights):
            if i != self.target and w > 0:
                raise ValueError(f"non-targeted weight for task {i} must be <= 0, got {w}")

    def as_dict(self) -> dict[int, float]:
        return dict(enumerate(self.weights))


def weights_non_stealthy(num_tasks: int, target: int) -> WeightVector:
    """Weight 1 on the targeted task, 0 everywhere else."""
    if not 0 <= target < num_tasks:
        raise ValueError(f"target {target} out of range for {num_tasks} tasks")
    return WeightVector(target, tuple(1.0 if i == target else 0.0 for i in range(num_tasks)))


def weighted_total_loss(weights: WeightVector, per_task_losses: dict[int, Tensor]) -> Tensor:
    """Sum of w_i * L_i over all tasks, differentiable through each loss."""
    total = None
    for task_id, w in enumerate(weights.weights):
        if task_id not in per_task_losses:
            raise ValueError(f"missing loss for task {task_id}")
        if w == 0.0:
            continue
        term = per_task_losses[task_id] * w
        total = term if total is None else total + term
    if total is None:  # all non-target weights zero is fine, target weight is not
        raise ValueError("weighted total loss has no nonzero terms")
    return total


@dataclass
class WeightSearchState:
    """Mutable state of the automated weight search for one sample."""

    target: int
    weights: dict[int, float]
    lam: float
    alpha: float
    ref_losses: dict[int, float]
    lambdas: dict[int, float] = field(default_factory=dict)
    satisfied_counts: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("attenuation coefficient must be in (0, 1)")
        if self.lam <= 0:
            raise ValueError("weight step size must be positive")
        for i in self.weights:
            if i != self.target and i not in self.lambdas:
                self.lambdas[i] = self.lam
                self.satisfied_counts[i] = 0


def auto_update_weights(state: WeightSearchState, adv_losses: dict[int, float],
                        ref_losses: dict[int, float]) -> WeightSearchState:
    """One weight-adaptation pass over the non-targeted tasks.

    For each i != target: w_i -= lambda_i * (adv - ref); if adv <= ref the
    constraint held, so lambda_i *= alpha. Weights are clamped to <= 0 after
    the update so the sign convention survives a constraint overshoot.
    """
    for task_id in sorted(state.weights):
        if task_id == state.target:
            continue
        if task_id not in adv_losses or task_id not in ref_losses:
            raise ValueError(f"missing loss for task {task_id}")
        adv, ref = adv_losses[task_id], ref_losses[task_id]
        w = state.weights[task_id] - state.lambdas[task_id] * (adv - ref)
        state.weights[task_id] = min(w, 0.0)
        if adv <= ref:
            state.lambdas[task_id] = state.lambdas[task_id] * state.alpha
            state.satisfied_counts[task_id] += 1
    return state


@dataclass(frozen=True)
class NonStealthy:
    pass


@dataclass(frozen=True)
class Manual:
    weights: WeightVector


@dataclass(frozen=True)
class Auto:
    lam: float = 0.05
    alpha: float = 0.5
    w_init: float = -0.01


@dataclass(frozen=True)
class TaskStealth:
    task_id: int
    loss_ok: bool
    metric_ok: bool


@dataclass(frozen=True)
class StealthVerdict:
    per_task: tuple[TaskStealth, ...]
    overall_stealthy: bool


def check_stealth(ref_losses: dict[int, float], adv_losses: dict[int, float],
                  ref_metrics: dict[int, MetricValue], adv_metrics: dict[int, MetricValue],
                  target: int) -> StealthVerdict:
    """Exact non-targeted loss comparisons; metric verdicts reported alongside."""
    per_task = []
    for task_id in sorted(ref_losses):
        if task_id == target:
            continue
        loss_ok = adv_losses[task_id] <= ref_losses[task_id]
        metric_ok = metric_improved_or_equal(
            ref_metrics[task_id].kind, ref_metrics[task_id].value, adv_metrics[task_id].value
        )
        per_task.append(TaskStealth(task_id, loss_ok, metric_ok))
    return StealthVerdict(tuple(per_task), all(t.loss_ok for t in per_task))


@dataclass
class AttackResult:
    delta: np.ndarray
    losses_before: dict[int, float]
    losses_after: dict[int, float]
    metrics_before: dict[int, MetricValue]
    metrics_after: dict[int, MetricValue]
    verdict: StealthVerdict
    final_weights: dict[int, float]
    loss_trace: list[float]
    iterations: int
    max_norm: float
    max_box_excess: float
    satisfied_counts: dict[int, int] | None = None
    final_lambdas: dict[int, float] | None = None
    weight_trace: list[dict[int, float]] | None = None


class _LossProvider:
    """Weighted total loss over the model's heads at the perturbed input.

    Caches the per-task losses of its latest forward. In auto mode it applies
    the weight-adaptation pass at the start of every call after the first, so
    the gradient of each step uses the weights updated from the perturbation
    that the previous step produced.
    """

    def __init__(self, model, labels, weights: dict[int, float], search_state=None):
        self.model = model
        self.labels = labels
        self.weights = dict(weights)
        self.search_state = search_state
        self.calls = 0
        self.last_losses: dict[int, float] = {}
        self.weight_trace: list[dict[int, float]] = []

    def _active_tasks(self):
        if self.search_state is not None:
            return sorted(self.weights)  # adaptation needs every task's loss
        return [t for t in sorted(self.weights) if self.weights[t] != 0.0]

    def __call__(self, x_adv: Tensor) -> Tensor:
        outputs = self.model.forward_all_tasks(x_adv, self._active_tasks())
        losses = {
            t: task_loss(self.model.spec.head(t).kind, out, self.labels[t])
            for t, out in outputs.items()
        }
        self.last_losses = {t: loss.item() for t, loss in losses.items()}
        if self.search_state is not None and self.calls > 0:
            auto_update_weights(self.search_state, self.last_losses, self.search_state.ref_losses)
            self.weights = dict(self.search_state.weights)
            self.weight_trace.append(dict(self.weights))
        self.calls += 1
        total = None
        for t in sorted(losses):
            w = self.weights[t]
            if w == 0.0:
                continue
            term = losses[t] * w
            total = term if total is None else total + term
        return total


def evaluate_clean(model, sample, task_ids=None):
    """Per-task losses and metrics of the frozen model on an unperturbed input."""
    outputs = model.forward_all_tasks(Tensor(sample.image), task_ids)
    losses, metrics = {}, {}
    for t, out in outputs.items():
        kind = model.spec.head(t).kind
        losses[t] = task_loss(kind, out, sample.labels[t]).item()
        metrics[t] = task_metric(kind, out, sample.labels[t], t)
    return losses, metrics


def run_smta_attack(model, sample, target: int, cfg: AttackConfig, search,
                    seed: int = 0) -> AttackResult:
    """Attack one sample under the given weight-search mode."""
    if not model.frozen:
        raise ValueError("attacks require a frozen model")
    m = model.spec.num_tasks
    if not 0 <= target < m:
        raise ValueError(f"target {target} out of range for {m} tasks")
    for h in model.spec.heads:
        if h.task_id not in sample.labels:
            raise ValueError(f"sample is missing labels for task {h.task_id}")

    ref_losses, ref_metrics = evaluate_clean(model, sample)

    search_state = None
    if isinstance(search, NonStealthy):
        weights = weights_non_stealthy(m, target)
    elif isinstance(search, Manual):
        if search.weights.target != target or len(search.weights.weights) != m:
            raise ValueError("manual weights do not match the target/task count")
        weights = search.weights
    elif isinstance(search, Auto):
        weights = WeightVector(
            target, tuple(1.0 if i == target else search.w_init for i in range(m))
        )
        search_state = WeightSearchState(
            target=target,
            weights=weights.as_dict(),
            lam=search.lam,
            alpha=search.alpha,
            ref_losses=ref_losses,
        )
    else:
        raise TypeError(f"unknown search mode {search!r}")

    provider = _LossProvider(model, sample.labels, weights.as_dict(), search_state)
    state = run_attack(model, sample, provider, cfg, seed=seed)

    x_adv = Tensor(sample.image) + Tensor(state.delta)
    outputs = model.forward_all_tasks(x_adv)
    adv_losses, adv_metrics = {}, {}
    for t, out in outputs.items():
        kind = model.spec.head(t).kind
        adv_losses[t] = task_loss(kind, out, sample.labels[t]).item()
        adv_metrics[t] = task_metric(kind, out, sample.labels[t], t)

    if search_state is not None:  # the update that follows the final step
        auto_update_weights(search_state, adv_losses, search_state.ref_losses)
        provider.weights = dict(search_state.weights)
        provider.weight_trace.append(dict(provider.weights))

    return AttackResult(
        delta=state.delta,
        losses_before=ref_losses,
        losses_after=adv_losses,
        metrics_before=ref_metrics,
        metrics_after=adv_metrics,
        verdict=check_stealth(ref_losses, adv_losses, ref_metrics, adv_metrics, target),
        final_weights=dict(provider.weights),
        loss_trace=state.loss_trace,
        iterations=state.iteration,
        max_norm=state.max_norm,
        max_box_excess=state.max_box_excess,
        satisfied_counts=dict(search_state.satisfied_counts) if search_state else None,
        final_lambdas=dict(search_state.lambdas) if search_state else None,
        weight_trace=provider.weight_trace if search_state else None,
    )


@dataclass(frozen=True)
class ManualGrid:
    start: float = 0.01
    multiplier: float = 2.0
    max_rounds: int = 12

    def __post_init__(self):
        if self.multiplier <= 1:
            raise ValueError("grid multiplier must be > 1")
        if self.start <= 0 or self.max_rounds < 1:
            raise ValueError("invalid manual search grid")


class ManualSearchError(RuntimeError):
    """Raised when the magnitude scan exhausts its rounds; carries the verdict."""

    def __init__(self, message: str, verdict: dict[int, bool]):
        super().__init__(message)
        self.verdict = verdict


def manual_search(model, calibration, target: int, cfg: AttackConfig,
                  grid: ManualGrid = ManualGrid(), seed: int = 0) -> WeightVector:
    """Geometric scan for fixed non-targeted weight magnitudes.

    Runs the fixed-weight attack over the calibration samples each round; any
    task whose mean adversarial loss exceeds its mean clean loss gets its
    magnitude multiplied for the next round. Returns the first weight vector
    whose mean constraints all hold.
    """
    m = model.spec.num_tasks
    others = [i for i in range(m) if i != target]
    ref_means = _mean_losses(model, calibration, None)

    magnitudes = {i: grid.start for i in others}
    verdict: dict[int, bool] = {}
    for _ in range(grid.max_rounds):
        weights = WeightVector(
            target, tuple(1.0 if i == target else -magnitudes[i] for i in range(m))
        )
        adv_means = _mean_losses(model, calibration, (weights, cfg, seed))
        verdict = {i: adv_means[i] <= ref_means[i] for i in others}
        if all(verdict.values()):
            return weights
        for i in others:
            if not verdict[i]:
                magnitudes[i] = magnitudes[i] * grid.multiplier
    raise ManualSearchError(
        f"manual search exhausted {grid.max_rounds} rounds; still violated: "
        f"{sorted(i for i, ok in verdict.items() if not ok)}",
        verdict,
    )


def _mean_losses(model, samples, attack) -> dict[int, float]:
    """Mean per-task losses over samples, clean or under a fixed-weight attack."""
    sums: dict[int, float] = {}
    for idx, sample in enumerate(samples):  # fixed index order: deterministic sums
        if attack is None:
            losses, _ = evaluate_clean(model, sample)
        else:
            weights, cfg, seed = attack
            provider = _LossProvider(model, sample.labels, weights.as_dict())
            state = run_attack(model, sample, provider, cfg, seed=seed * 1000003 + idx)
            x_adv = Tensor(sample.image) + Tensor(state.delta)
            outputs = model.forward_all_tasks(x_adv)
            losses = {
                t: task_loss(model.spec.head(t).kind, out, sample.labels[t])
                for t, out in outputs.items()
            }
            losses = {t: v.item() for t, v in losses.items()}
        for t, v in losses.items():
            sums[t] = sums.get(t, 0.0) + v
    return {t: v / len(samples) for t, v in sums.items()}


def single_task_baseline(model, sample, cfg: AttackConfig, seed: int = 0) -> AttackResult:
    """Plain targeted attack on a model trained for exactly one task."""
    if model.spec.num_tasks != 1:
        raise ValueError("single-task baseline requires a one-task model")
    return run_smta_attack(model, sample, 0, cfg, NonStealthy(), seed=seed)
