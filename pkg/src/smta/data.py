"""Synthetic multi-task scenes: shapes on a background with aligned labels.

Each sample is a [3,H,W] image in [-1, 1] plus three pixel-aligned label maps:
semantic class (background 0, shapes 1..C-1), depth from shape layering
(near shapes occlude far ones, each with a raised profile), and unit surface
normals taken from the gradient of a smoothed height field built from the
depth map. Flat empty scenes therefore label as class 0 everywhere with
constant depth and normal (0, 0, 1).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import binio

DATA_MAGIC = b"SMTD"
DATA_VERSION = 1

SEG_TASK, DEPTH_TASK, NORMAL_TASK = 0, 1, 2

# base colors per class in [-1, 1]; background first
_PALETTE = np.array(
    [
        [-0.55, -0.55, -0.45],
        [0.85, -0.35, -0.35],
        [-0.35, 0.80, -0.30],
        [-0.30, -0.30, 0.90],
        [0.80, 0.70, -0.40],
        [0.75, -0.30, 0.75],
        [-0.35, 0.75, 0.80],
        [0.85, 0.45, 0.10],
    ]
)


@dataclass(frozen=True)
class DatasetSpec:
    num_samples: int
    height: int = 16
    width: int = 16
    channels: int = 3
    num_classes: int = 4
    seed: int = 0
    min_shapes: int = 2
    max_shapes: int = 5
    train_count: int | None = None
    cal_count: int | None = None
    eval_count: int | None = None

    def __post_init__(self):
        if self.channels != 3:
            raise ValueError("scenes are rendered with 3 channels")
        if not 2 <= self.num_classes <= len(_PALETTE):
            raise ValueError(f"num_classes must be in [2, {len(_PALETTE)}]")
        if self.min_shapes > self.max_shapes or self.min_shapes < 0:
            raise ValueError("invalid shape count range")
        splits = self.split_counts()
        if sum(splits) != self.num_samples:
            raise ValueError(f"splits {splits} do not sum to num_samples {self.num_samples}")

    def split_counts(self) -> tuple[int, int, int]:
        if self.train_count is not None:
            return (self.train_count, self.cal_count or 0, self.eval_count or 0)
        if self.num_samples >= 150:
            return (self.num_samples - 100, 50, 50)
        train = int(self.num_samples * 0.6)
        cal = int(self.num_samples * 0.2)
        return (train, cal, self.num_samples - train - cal)

    def to_json_dict(self) -> dict:
        return {
            "num_samples": self.num_samples,
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
            "num_classes": self.num_classes,
            "seed": self.seed,
            "min_shapes": self.min_shapes,
            "max_shapes": self.max_shapes,
            "train_count": self.split_counts()[0],
            "cal_count": self.split_counts()[1],
            "eval_count": self.split_counts()[2],
        }

    @staticmethod
    def from_json_dict(d: dict) -> "DatasetSpec":
        return DatasetSpec(**d)


@dataclass
class Sample:
    image: np.ndarray  # [3,H,W]
    labels: dict[int, np.ndarray]  # task id -> label map


@dataclass
class Dataset:
    spec: DatasetSpec
    samples: list[Sample] = field(default_factory=list)

    def split(self, name: str) -> list[Sample]:
        train, cal, _ = self.spec.split_counts()
        if name == "train":
            return self.samples[:train]
        if name == "cal":
            return self.samples[train : train + cal]
        if name == "eval":
            return self.samples[train + cal :]
        raise ValueError(f"unknown split {name!r}")


@dataclass(frozen=True)
class Shape:
    kind: str  # "rect" | "circle"
    class_id: int
    level: float  # base depth layer, smaller is nearer
    amp: float  # height of the raised profile
    geom: tuple  # rect: (r0, c0, h, w); circle: (cy, cx, radius)


def sample_scene(rng: np.random.Generator, spec: DatasetSpec) -> list[Shape]:
    """Draw 2..5 (or the configured range of) random shapes for one scene."""
    n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    shapes = []
    for _ in range(n):
        kind = "rect" if rng.random() < 0.5 else "circle"
        class_id = int(rng.integers(1, spec.num_classes))
        level = float(rng.uniform(0.30, 0.85))
        amp = float(rng.uniform(0.08, 0.22))
        if kind == "rect":
            h = int(rng.integers(4, max(5, spec.height // 2 + 3)))
            w = int(rng.integers(4, max(5, spec.width // 2 + 3)))
            r0 = int(rng.integers(-1, spec.height - h + 2))
            c0 = int(rng.integers(-1, spec.width - w + 2))
            geom = (r0, c0, h, w)
        else:
            radius = float(rng.uniform(2.0, min(spec.height, spec.width) / 3.0))
            cy = float(rng.uniform(1.0, spec.height - 1.0))
            cx = float(rng.uniform(1.0, spec.width - 1.0))
            geom = (cy, cx, radius)
        shapes.append(Shape(kind, class_id, level, amp, geom))
    return shapes


def _shape_profile(shape: Shape, height: int, width: int) -> np.ndarray:
    """Raised profile in [0, 1] inside the shape, 0 outside (dome / tent)."""
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    if shape.kind == "rect":
        r0, c0, h, w = shape.geom
        dr = np.minimum(rows - r0, r0 + h - 1 - rows)
        dc = np.minimum(cols - c0, c0 + w - 1 - cols)
        d = np.minimum(dr, dc).astype(np.float64)
        inside = (dr >= 0) & (dc >= 0)
        extent = max((min(h, w) - 1) / 2.0, 1.0)
        prof = np.where(inside, np.minimum(d / extent + 0.25, 1.0), 0.0)
    else:
        cy, cx, radius = shape.geom
        d2 = (rows - cy) ** 2 + (cols - cx) ** 2
        inside = d2 <= radius**2
        prof = np.where(inside, np.sqrt(np.maximum(1.0 - d2 / radius**2, 0.0)) * 0.75 + 0.25, 0.0)
    return prof


def rasterize_scene(shapes, height: int, width: int):
    """Paint shapes far-to-near; returns (label map, depth map, visible pixel counts)."""
    labels = np.zeros((height, width), dtype=np.int64)
    depth = np.ones((height, width), dtype=np.float64)
    owner = np.full((height, width), -1, dtype=np.int64)
    order = sorted(range(len(shapes)), key=lambda i: (-shapes[i].level, i))
    for i in order:
        s = shapes[i]
        prof = _shape_profile(s, height, width)
        d_shape = s.level - s.amp * prof
        win = (prof > 0.0) & (d_shape < depth)
        depth[win] = d_shape[win]
        labels[win] = s.class_id
        owner[win] = i
    counts = [int((owner == i).sum()) for i in range(len(shapes))]
    return labels, depth, counts


def _box_smooth(a: np.ndarray, passes: int = 2) -> np.ndarray:
    for _ in range(passes):
        p = np.pad(a, 1, mode="edge")
        a = sum(
            p[1 + di : 1 + di + a.shape[0], 1 + dj : 1 + dj + a.shape[1]]
            for di in (-1, 0, 1)
            for dj in (-1, 0, 1)
        ) / 9.0
    return a


def normals_from_depth(depth: np.ndarray, slope_scale: float = 4.0) -> np.ndarray:
    """Unit normals of the smoothed height field 1 - depth, as [3,H,W]."""
    height_field = _box_smooth(1.0 - depth)
    gy, gx = np.gradient(height_field)
    n = np.stack([-gx * slope_scale, -gy * slope_scale, np.ones_like(depth)])
    return n / np.linalg.norm(n, axis=0, keepdims=True)


def render_sample(rng: np.random.Generator, spec: DatasetSpec) -> Sample:
    shapes = sample_scene(rng, spec)
    labels, depth, _ = rasterize_scene(shapes, spec.height, spec.width)
    normals = normals_from_depth(depth)
    height01 = 1.0 - depth
    base = _PALETTE[labels].transpose(2, 0, 1)  # [3,H,W]
    shading = 0.55 + 0.45 * height01
    image = base * shading[None, :, :] + rng.normal(0.0, 0.02, size=(3, spec.height, spec.width))
    image = np.clip(image, -1.0, 1.0)
    return Sample(
        image=image,
        labels={
            SEG_TASK: labels,
            DEPTH_TASK: depth[None, :, :],
            NORMAL_TASK: normals,
        },
    )


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Deterministic dataset for the spec's seed (one generator, fixed order)."""
    rng = np.random.default_rng(spec.seed)
    return Dataset(spec, [render_sample(rng, spec) for _ in range(spec.num_samples)])


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "wb") as f:
        binio.write_header(f, DATA_MAGIC, DATA_VERSION, dataset.spec.to_json_dict())
        f.write(struct.pack("<I", len(dataset.samples)))
        for s in dataset.samples:
            binio.write_tensor(f, s.image)
            binio.write_tensor(f, s.labels[SEG_TASK].astype(np.float64))
            binio.write_tensor(f, s.labels[DEPTH_TASK])
            binio.write_tensor(f, s.labels[NORMAL_TASK])


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        header = binio.read_header(f, DATA_MAGIC, DATA_VERSION)
        spec = DatasetSpec.from_json_dict(header)
        pos = f.tell()
        raw = f.read(4)
        if len(raw) != 4:
            raise binio.FormatError(f"truncated file: missing sample count at offset {pos}")
        (count,) = struct.unpack("<I", raw)
        if count != spec.num_samples:
            raise binio.FormatError(
                f"sample count {count} at offset {pos} disagrees with header {spec.num_samples}"
            )
        samples = []
        for _ in range(count):
            image = binio.read_tensor(f)
            seg = binio.read_tensor(f).astype(np.int64)
            depth = binio.read_tensor(f)
            normals = binio.read_tensor(f)
            samples.append(Sample(image, {SEG_TASK: seg, DEPTH_TASK: depth, NORMAL_TASK: normals}))
        if f.read(1):
            raise binio.FormatError(f"trailing bytes at offset {f.tell() - 1}")
    return Dataset(spec, samples)
