"""Per-task differentiable losses and the evaluation metrics they are scored by.

Three task families, mirroring a segmentation / depth / surface-normal triple:
  categorical  -> per-pixel cross-entropy loss, mIoU metric (higher better)
  scalar       -> per-pixel L1 loss, aErr metric (lower better)
  unit_vector  -> per-pixel (1 - cos) loss, mDist metric in degrees (lower better)

Losses return scalar graph tensors (differentiable); metrics return plain
MetricValue records. Both reduce by the mean over all pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, channel_broadcast, softmax_channel

UNIT_NORM_TOL = 1e-6

METRIC_HIGHER_BETTER = {"miou": True, "aerr": False, "mdist": False}


@dataclass(frozen=True)
class TaskKind:
    """One of 'categorical' (num_classes set), 'scalar', or 'unit_vector'."""

    kind: str
    num_classes: int | None = None

    def __post_init__(self):
        if self.kind not in ("categorical", "scalar", "unit_vector"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "categorical":
            if self.num_classes is None or self.num_classes < 2:
                raise ValueError("categorical tasks need num_classes >= 2")
        elif self.num_classes is not None:
            raise ValueError(f"{self.kind} task does not take num_classes")

    @property
    def out_channels(self) -> int:
        return {"categorical": self.num_classes, "scalar": 1, "unit_vector": 3}[self.kind]

    @property
    def metric_kind(self) -> str:
        return {"categorical": "miou", "scalar": "aerr", "unit_vector": "mdist"}[self.kind]


@dataclass(frozen=True)
class MetricValue:
    task_id: int
    kind: str  # miou | aerr | mdist
    value: float


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def loss_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over pixels of -log softmax(logits)[label]."""
    labels = np.asarray(_as_array(labels), dtype=np.int64)
    c = logits.shape[0]
    if labels.shape != logits.shape[1:]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c}): found {labels.min()}..{labels.max()}")
    onehot = np.zeros(logits.shape)
    rows, cols = np.indices(labels.shape)
    onehot[labels, rows, cols] = 1.0
    picked = (softmax_channel(logits).log() * Tensor(onehot)).sum(axis=0)
    return picked.mean() * -1.0


def loss_abs_error(pred: Tensor, target) -> Tensor:
    """Mean absolute error; subgradient 0 where pred equals target."""
    target = _as_array(target)
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} does not match target {target.shape}")
    return (pred - Tensor(target)).abs().mean()


def _check_unit(name: str, v: np.ndarray) -> None:
    norms = np.linalg.norm(v, axis=0)
    worst = np.abs(norms - 1.0).max()
    if worst > UNIT_NORM_TOL:
        raise ValueError(f"{name} vectors are not unit-norm: max deviation {worst:.3e}")


def loss_angular(pred: Tensor, target) -> Tensor:
    """Mean over pixels of 1 - <pred, target> for per-pixel unit 3-vectors."""
    target = _as_array(target)
    if pred.shape != target.shape or pred.shape[0] != 3:
        raise ValueError(f"expected matching [3,H,W] inputs, got {pred.shape} and {target.shape}")
    _check_unit("pred", pred.data)
    _check_unit("target", target)
    dot = (pred * Tensor(target)).sum(axis=0)
    return (1.0 - dot).mean()


def metric_miou(pred_labels, labels, num_classes: int) -> MetricValue:
    """Mean IoU (x100) over the classes present in the ground truth."""
    pred_labels = np.asarray(_as_array(pred_labels), dtype=np.int64)
    labels = np.asarray(_as_array(labels), dtype=np.int64)
    ious = []
    for c in range(num_classes):
        in_gt = labels == c
        if not in_gt.any():
            continue
        in_pred = pred_labels == c
        union = np.logical_or(in_gt, in_pred).sum()
        inter = np.logical_and(in_gt, in_pred).sum()
        ious.append(inter / union)
    value = 100.0 * float(np.mean(ious)) if ious else 0.0
    return MetricValue(task_id=-1, kind="miou", value=value)


def metric_aerr(pred, target) -> MetricValue:
    pred, target = _as_array(pred), _as_array(target)
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} does not match target {target.shape}")
    return MetricValue(task_id=-1, kind="aerr", value=float(np.abs(pred - target).mean()))


def metric_mdist(pred, target) -> MetricValue:
    """Mean angular distance in degrees between per-pixel unit vectors."""
    pred, target = _as_array(pred), _as_array(target)
    if pred.shape != target.shape or pred.shape[0] != 3:
        raise ValueError(f"expected matching [3,H,W] inputs, got {pred.shape} and {target.shape}")
    _check_unit("pred", pred)
    _check_unit("target", target)
    dot = np.clip((pred * target).sum(axis=0), -1.0, 1.0)
    return MetricValue(task_id=-1, kind="mdist", value=float(np.degrees(np.arccos(dot)).mean()))


def task_loss(kind: TaskKind, output: Tensor, label) -> Tensor:
    """Dispatch the differentiable loss for a task head's output."""
    if kind.kind == "categorical":
        return loss_cross_entropy(output, label)
    if kind.kind == "scalar":
        return loss_abs_error(output, label)
    return loss_angular(output, label)


def task_metric(kind: TaskKind, output, label, task_id: int) -> MetricValue:
    """Dispatch the evaluation metric for a task head's (non-graph) output."""
    out = _as_array(output)
    if kind.kind == "categorical":
        m = metric_miou(out.argmax(axis=0), label, kind.num_classes)
    elif kind.kind == "scalar":
        m = metric_aerr(out, label)
    else:
        m = metric_mdist(out, label)
    return MetricValue(task_id=task_id, kind=m.kind, value=m.value)


def metric_improved_or_equal(kind: str, before: float, after: float) -> bool:
    """True when `after` is equal-or-better than `before` for this metric."""
    if METRIC_HIGHER_BETTER[kind]:
        return after >= before
    return after <= before


def normalize_unit(v: Tensor, eps: float = 1e-8, passes: int = 2) -> Tensor:
    """Per-pixel L2 normalization of a [3,H,W] field, v / (|v| + eps), iterated.

    Two passes bound the unit-norm deficit by ~eps even for tiny raw vectors,
    which keeps the result inside loss_angular's tolerance.
    """
    for _ in range(passes):
        norm = ((v * v).sum(axis=0)).sqrt()
        v = v / channel_broadcast(norm + eps, v.shape[0])
    return v
