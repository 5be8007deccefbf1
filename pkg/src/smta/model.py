"""Hard-parameter-sharing multi-task network: shared conv trunk, one head per task.

The trunk is a stack of 3x3 same-padded convolutions with relu between; each
head is a single 3x3 convolution, with per-pixel L2 normalization appended for
unit-vector tasks. Models train with plain SGD and are frozen afterwards;
attacks only ever see frozen models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import binio
from .autodiff import Tensor, backward, conv2d
from .tasks import TaskKind, normalize_unit, task_loss

MODEL_MAGIC = b"SMTM"
MODEL_VERSION = 1


@dataclass(frozen=True)
class HeadSpec:
    task_id: int
    kind: TaskKind


@dataclass(frozen=True)
class ModelSpec:
    input_channels: int
    input_height: int
    input_width: int
    trunk: tuple  # sequence of {"op": "conv2d", "out_channels": n} / {"op": "relu"}
    heads: tuple  # sequence of HeadSpec, one per task

    def __post_init__(self):
        if self.input_channels < 1 or self.input_height < 1 or self.input_width < 1:
            raise ValueError("input dimensions must be positive")
        if not self.heads:
            raise ValueError("model needs at least one head")
        ids = [h.task_id for h in self.heads]
        if sorted(ids) != list(range(len(ids))):
            raise ValueError(f"head task ids must be exactly 0..{len(ids) - 1}, got {ids}")
        for layer in self.trunk:
            if layer["op"] not in ("conv2d", "relu"):
                raise ValueError(f"unsupported trunk layer {layer['op']!r}")

    @property
    def num_tasks(self) -> int:
        return len(self.heads)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.input_channels, self.input_height, self.input_width)

    def head(self, task_id: int) -> HeadSpec:
        return self.heads[task_id]

    def to_json_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "input_height": self.input_height,
            "input_width": self.input_width,
            "trunk": list(self.trunk),
            "heads": [
                {
                    "task_id": h.task_id,
                    "kind": h.kind.kind,
                    "num_classes": h.kind.num_classes,
                }
                for h in self.heads
            ],
        }

    @staticmethod
    def from_json_dict(d: dict) -> "ModelSpec":
        heads = tuple(
            HeadSpec(task_id=h["task_id"], kind=TaskKind(h["kind"], h.get("num_classes")))
            for h in d["heads"]
        )
        return ModelSpec(
            input_channels=d["input_channels"],
            input_height=d["input_height"],
            input_width=d["input_width"],
            trunk=tuple(d["trunk"]),
            heads=heads,
        )


def default_model_spec(num_classes: int = 4, height: int = 16, width: int = 16) -> ModelSpec:
    """Three-conv trunk (3->8->8->8) with segmentation / depth / normal heads."""
    trunk = (
        {"op": "conv2d", "out_channels": 8},
        {"op": "relu"},
        {"op": "conv2d", "out_channels": 8},
        {"op": "relu"},
        {"op": "conv2d", "out_channels": 8},
        {"op": "relu"},
    )
    heads = (
        HeadSpec(0, TaskKind("categorical", num_classes)),
        HeadSpec(1, TaskKind("scalar")),
        HeadSpec(2, TaskKind("unit_vector")),
    )
    return ModelSpec(3, height, width, trunk, heads)


def single_task_model_spec(kind: TaskKind, height: int = 16, width: int = 16) -> ModelSpec:
    """Same trunk as the default spec but a single head (unshared baseline)."""
    base = default_model_spec(height=height, width=width)
    return ModelSpec(3, height, width, base.trunk, (HeadSpec(0, kind),))


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.1
    batch_size: int = 10
    seed: int = 7
    task_weights: dict[int, float] | None = None  # defaults to 1.0 per task

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


class MultiTaskModel:
    """Parameter container plus the forward pass; frozen models are read-only."""

    def __init__(self, spec: ModelSpec, trunk_params, head_params, frozen: bool = False):
        self.spec = spec
        self.trunk_params = trunk_params  # list[(w, b)] per conv layer
        self.head_params = head_params  # {task_id: (w, b)}
        self.frozen = frozen

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in self.trunk_params:
            out += [w, b]
        for task_id in sorted(self.head_params):
            w, b = self.head_params[task_id]
            out += [w, b]
        return out

    def freeze(self) -> None:
        self.frozen = True
        for p in self.parameters():
            p.requires_grad = False

    def _check_input(self, x: Tensor) -> None:
        if x.shape != self.spec.input_shape:
            raise ValueError(f"input shape {x.shape} does not match spec {self.spec.input_shape}")

    def forward_trunk(self, x: Tensor) -> Tensor:
        self._check_input(x)
        h = x
        conv_idx = 0
        for layer in self.spec.trunk:
            if layer["op"] == "conv2d":
                w, b = self.trunk_params[conv_idx]
                h = conv2d(h, w, b)
                conv_idx += 1
            else:
                h = h.relu()
        return h

    def forward_head(self, task_id: int, trunk_out: Tensor) -> Tensor:
        w, b = self.head_params[task_id]
        out = conv2d(trunk_out, w, b)
        if self.spec.head(task_id).kind.kind == "unit_vector":
            out = normalize_unit(out)
        return out

    def forward_all_tasks(self, x: Tensor, task_ids=None) -> dict[int, Tensor]:
        """Evaluate the trunk once and apply each requested head to it."""
        trunk_out = self.forward_trunk(x)
        if task_ids is None:
            task_ids = [h.task_id for h in self.spec.heads]
        return {t: self.forward_head(t, trunk_out) for t in task_ids}


def _init_conv(rng: np.random.Generator, out_c: int, in_c: int) -> tuple[Tensor, Tensor]:
    bound = np.sqrt(1.0 / (in_c * 9))
    w = rng.uniform(-bound, bound, size=(out_c, in_c, 3, 3))
    b = rng.uniform(-bound, bound, size=(out_c,))
    return Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)


def build_model(spec: ModelSpec, seed: int) -> MultiTaskModel:
    """Initialize parameters uniformly in [-a, a], a = sqrt(1/fan_in)."""
    rng = np.random.default_rng(seed)
    trunk_params = []
    in_c = spec.input_channels
    for layer in spec.trunk:
        if layer["op"] == "conv2d":
            trunk_params.append(_init_conv(rng, layer["out_channels"], in_c))
            in_c = layer["out_channels"]
    head_params = {}
    for h in spec.heads:
        head_params[h.task_id] = _init_conv(rng, h.kind.out_channels, in_c)
    return MultiTaskModel(spec, trunk_params, head_params, frozen=False)


def sgd_step(params, grads: dict, lr: float) -> None:
    """One plain gradient-descent update, in place."""
    for p in params:
        g = grads.get(p)
        if g is not None:
            p.data = p.data - lr * g


def train(model: MultiTaskModel, dataset, cfg: TrainConfig) -> MultiTaskModel:
    """Minibatch SGD on the (optionally weighted) sum of per-task losses.

    Freezes and returns the model. Deterministic for a fixed seed: shuffling
    comes from one generator and batches reduce in index order.
    """
    if model.frozen:
        raise ValueError("model is frozen; training would mutate read-only parameters")
    weights = cfg.task_weights or {}
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    n = len(dataset)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            total = None
            for idx in batch:
                sample = dataset[int(idx)]
                outputs = model.forward_all_tasks(Tensor(sample.image))
                for h in model.spec.heads:
                    w = float(weights.get(h.task_id, 1.0))
                    if w == 0.0:
                        continue
                    loss = task_loss(h.kind, outputs[h.task_id], sample.labels[h.task_id]) * w
                    total = loss if total is None else total + loss
            total = total * (1.0 / len(batch))
            value = total.item()
            if not np.isfinite(value):
                raise RuntimeError(f"training diverged: non-finite loss at epoch {epoch}")
            sgd_step(params, backward(total), cfg.learning_rate)
    model.freeze()
    return model


def save_model(model: MultiTaskModel, path) -> None:
    header = {"spec": model.spec.to_json_dict(), "frozen": model.frozen}
    with open(path, "wb") as f:
        binio.write_header(f, MODEL_MAGIC, MODEL_VERSION, header)
        for p in model.parameters():
            binio.write_tensor(f, p.data)


def load_model(path) -> MultiTaskModel:
    with open(path, "rb") as f:
        header = binio.read_header(f, MODEL_MAGIC, MODEL_VERSION)
        spec = ModelSpec.from_json_dict(header["spec"])
        skeleton = build_model(spec, seed=0)
        params = skeleton.parameters()
        for p in params:
            arr = binio.read_tensor(f)
            if arr.shape != p.data.shape:
                raise binio.FormatError(
                    f"parameter shape {arr.shape} does not match spec shape {p.data.shape}"
                )
            p.data = arr
        extra = f.read(1)
        if extra:
            raise binio.FormatError(f"trailing bytes at offset {f.tell() - 1}")
    if header.get("frozen", False):
        skeleton.freeze()
    return skeleton


def hash_parameters(model: MultiTaskModel) -> str:
    """Stable hex digest of every parameter byte; used to prove frozenness."""
    import hashlib

    digest = hashlib.sha256()
    for p in model.parameters():
        digest.update(p.data.tobytes())
    return digest.hexdigest()
