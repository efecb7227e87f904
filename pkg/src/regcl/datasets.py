"""Synthetic domain generators for the domain-incremental benchmark."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import as_matrix

FAMILIES = ("linear_teacher", "toy_segmentation")
SHAPES = ("disk", "square", "ring", "cross", "ellipse", "triangle")
SPLITS = ("train", "test")

SEGMENTATION_DEFAULTS = {
    "grid": 16,
    "shape": "disk",
    "fg": 1.0,
    "bg": 0.0,
    "noise": 0.0,
    "contrast": 1.0,
    "size_min": 3.0,
    "size_max": 5.0,
}
LINEAR_DEFAULTS = {
    "dim": 6,
    "outputs": 3,
    "teacher_seed": 0,
    "cov_scales": None,
    "noise": 0.0,
}


@dataclass(frozen=True)
class DomainSpec:
    family: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown domain family {self.family!r}; expected one of {FAMILIES}")
        defaults = SEGMENTATION_DEFAULTS if self.family == "toy_segmentation" else LINEAR_DEFAULTS
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise ValueError(f"unknown {self.family} parameters: {sorted(unknown)}")
        merged = {**defaults, **self.params}
        if self.family == "toy_segmentation":
            if merged["shape"] not in SHAPES:
                raise ValueError(f"unknown shape {merged['shape']!r}; expected one of {SHAPES}")
            if int(merged["grid"]) < 4:
                raise ValueError("grid must be at least 4")
            if merged["noise"] < 0:
                raise ValueError("noise must be >= 0")
            if not 0 < merged["size_min"] <= merged["size_max"]:
                raise ValueError("need 0 < size_min <= size_max")
        else:
            if merged["dim"] < 1 or merged["outputs"] < 1:
                raise ValueError("dim and outputs must be positive")
            if merged["noise"] < 0:
                raise ValueError("noise must be >= 0")
        object.__setattr__(self, "params", merged)
        if not self.name:
            object.__setattr__(self, "name", f"{self.family}-{self.seed}")

    def to_dict(self):
        return {"family": self.family, "params": dict(self.params), "seed": self.seed, "name": self.name}

    @classmethod
    def from_dict(cls, d):
        return cls(d["family"], dict(d.get("params", {})), int(d.get("seed", 0)), d.get("name", ""))


class TaskDataset:
    """Inputs and targets of one split of one domain.

    Rows are read through the ``inputs`` / ``targets`` properties only, which
    lets tests substitute an access-logging double.
    """

    def __init__(self, task_id, inputs, targets, split, domain_spec):
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")
        self.task_id = task_id
        self._inputs = as_matrix(inputs, "inputs")
        self._targets = as_matrix(targets, "targets")
        if self._inputs.shape[0] != self._targets.shape[0]:
            raise ValueError("inputs and targets have different row counts")
        self.split = split
        self.domain_spec = domain_spec

    @property
    def inputs(self):
        return self._inputs

    @property
    def targets(self):
        return self._targets

    def __len__(self):
        return self._inputs.shape[0]

    def subset(self, idx):
        return TaskDataset(self.task_id, self.inputs[idx], self.targets[idx], self.split, self.domain_spec)

    def same_values(self, other):
        return (
            self.task_id == other.task_id
            and self.split == other.split
            and np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.targets, other.targets)
        )


def shape_mask(shape, grid, cy, cx, size, angle=0.0):
    yy, xx = np.mgrid[0:grid, 0:grid].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if shape == "disk":
        return dy**2 + dx**2 <= size**2
    if shape == "square":
        return (np.abs(dy) <= size * 0.85) & (np.abs(dx) <= size * 0.85)
    if shape == "ring":
        r2 = dy**2 + dx**2
        return (r2 <= size**2) & (r2 >= (0.5 * size) ** 2)
    if shape == "cross":
        arm = max(size * 0.35, 0.75)
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= size)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= size))
    if shape == "ellipse":
        c, s = np.cos(angle), np.sin(angle)
        u, v = c * dx + s * dy, -s * dx + c * dy
        return (u / size) ** 2 + (v / (0.55 * size)) ** 2 <= 1.0
    if shape == "triangle":
        # Upward triangle with apex at cy - size, base at cy + size.
        rel = (dy + size) / (2.0 * size)
        return (rel >= 0) & (rel <= 1) & (np.abs(dx) <= rel * size)
    raise ValueError(f"unknown shape {shape!r}")


def _segmentation(spec, n, rng):
    p = spec.params
    g = int(p["grid"])
    X = np.empty((n, g * g))
    Y = np.empty((n, g * g))
    for i in range(n):
        size = rng.uniform(p["size_min"], p["size_max"])
        margin = min(size, g / 2 - 1)
        cy = rng.uniform(margin, g - 1 - margin)
        cx = rng.uniform(margin, g - 1 - margin)
        angle = rng.uniform(0.0, np.pi)
        mask = shape_mask(p["shape"], g, cy, cx, size, angle).astype(np.float64)
        if not mask.any():
            mask[int(round(cy)), int(round(cx))] = 1.0
        noise = rng.normal(0.0, 1.0, size=(g, g)) if p["noise"] > 0 else np.zeros((g, g))
        img = p["bg"] + p["contrast"] * (p["fg"] - p["bg"]) * mask + p["noise"] * noise
        X[i] = img.ravel()
        Y[i] = mask.ravel()
    return X, Y


def teacher_matrix(spec):
    p = spec.params
    rng = np.random.default_rng(p["teacher_seed"])
    return rng.normal(size=(int(p["dim"]), int(p["outputs"])))


def _linear(spec, n, rng):
    p = spec.params
    d = int(p["dim"])
    scales = np.ones(d) if p["cov_scales"] is None else np.asarray(p["cov_scales"], dtype=np.float64)
    if scales.shape != (d,):
        raise ValueError("cov_scales must have one entry per input dimension")
    X = rng.normal(size=(n, d)) * scales
    Y = X @ teacher_matrix(spec)
    if p["noise"] > 0:
        Y = Y + p["noise"] * rng.normal(size=Y.shape)
    return X, Y


def gen_domain(spec, n_train, n_test):
    """Draw deterministic, disjoint train and test splits for ``spec``.

    Segmentation targets are binary masks. Linear-teacher targets are the
    raw teacher outputs ``X T`` plus optional Gaussian noise.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    train_seq, test_seq = np.random.SeedSequence(spec.seed).spawn(2)
    make = _segmentation if spec.family == "toy_segmentation" else _linear
    Xtr, Ytr = make(spec, n_train, np.random.default_rng(train_seq))
    Xte, Yte = make(spec, n_test, np.random.default_rng(test_seq))
    return (
        TaskDataset(spec.name, Xtr, Ytr, "train", spec),
        TaskDataset(spec.name, Xte, Yte, "test", spec),
    )
