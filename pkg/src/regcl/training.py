"""Segmentation losses and seeded SGD fine-tuning of LoRA adapters.

The training objective is ``mse + focal + 10 * dice`` on sigmoid
probabilities. Each loss returns ``(value, grad)`` with the gradient taken
with respect to the probabilities.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .linalg import as_matrix, gram
from .model import LoraAdapter, forward_capture, sigmoid

PROB_EPS = 1e-7
SCHEDULES = ("cosine_annealing", "constant")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, value=float("nan"), task=None):
        where = f" on task {task}" if task is not None else ""
        super().__init__(f"training diverged at step {step}{where} (loss={value})")
        self.step = step
        self.task = task


@dataclass(frozen=True)
class LossConfig:
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_smooth: float = 1.0
    dice_weight: float = 10.0
    mse_weight: float = 1.0
    focal_weight: float = 1.0

    def __post_init__(self):
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if not 0.0 < self.focal_alpha < 1.0:
            raise ValueError("focal_alpha must lie in (0, 1)")
        if not self.dice_smooth > 0:
            raise ValueError("dice_smooth must be > 0")
        for w in (self.dice_weight, self.mse_weight, self.focal_weight):
            if not math.isfinite(w):
                raise ValueError("loss weights must be finite")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 0.005
    schedule: str = "cosine_annealing"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")

    def to_dict(self):
        return asdict(self)


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    return pred, target


def mse_loss(pred, target):
    pred, target = _pair(pred, target)
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def focal_loss(pred, target, cfg=LossConfig()):
    """Mean of ``-alpha_t (1 - p_t)^gamma log p_t`` over all elements."""
    pred, target = _pair(pred, target)
    p = np.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    pos = target > 0.5
    p_t = np.where(pos, p, 1.0 - p)
    alpha_t = np.where(pos, cfg.focal_alpha, 1.0 - cfg.focal_alpha)
    gamma = cfg.focal_gamma
    one_minus = 1.0 - p_t
    log_pt = np.log(p_t)
    values = -alpha_t * one_minus**gamma * log_pt
    # d/dp_t of the element loss, then chain through p_t = p or 1 - p.
    if gamma == 0:
        dpt = -alpha_t / p_t
    else:
        dpt = alpha_t * (gamma * one_minus ** (gamma - 1.0) * log_pt - one_minus**gamma / p_t)
    grad = np.where(pos, dpt, -dpt) / values.size
    grad = np.where((pred > PROB_EPS) & (pred < 1.0 - PROB_EPS), grad, 0.0)
    return float(np.mean(values)), grad


def dice_loss(pred, target, cfg=LossConfig()):
    """Soft dice per row (sample), averaged over rows."""
    pred, target = _pair(pred, target)
    pred = np.atleast_2d(pred)
    target = np.atleast_2d(target)
    s = cfg.dice_smooth
    inter = np.sum(pred * target, axis=1, keepdims=True)
    denom = np.sum(pred, axis=1, keepdims=True) + np.sum(target, axis=1, keepdims=True) + s
    num = 2.0 * inter + s
    per_sample = 1.0 - num / denom
    n = pred.shape[0]
    grad = -(2.0 * target * denom - num) / denom**2 / n
    return float(np.mean(per_sample)), grad


def total_loss(pred, target, cfg=LossConfig(), return_terms=False):
    """Weighted ``mse + focal + dice`` with the matching gradient."""
    terms, grad = {}, np.zeros(np.shape(pred))
    value = 0.0
    for name, weight, fn in (
        ("mse", cfg.mse_weight, lambda: mse_loss(pred, target)),
        ("focal", cfg.focal_weight, lambda: focal_loss(pred, target, cfg)),
        ("dice", cfg.dice_weight, lambda: dice_loss(pred, target, cfg)),
    ):
        if weight == 0:
            terms[name] = 0.0
            continue
        v, g = fn()
        terms[name] = v
        value += weight * v
        grad = grad + weight * g
    if return_terms:
        return value, grad, terms
    return value, grad


def lr_at(tc, epoch):
    if tc.schedule == "constant" or tc.epochs == 0:
        return tc.lr
    return 0.5 * tc.lr * (1.0 + math.cos(math.pi * epoch / tc.epochs))


def _loss_and_grads(model, X, Y, lc):
    """Loss terms and gradients for every trainable parameter of ``model``."""
    logits, captures = forward_capture(model, X, capture=True)
    if model.output == "sigmoid":
        prob = sigmoid(logits)
        value, gp, terms = total_loss(prob, Y, lc, return_terms=True)
        G = gp * prob * (1.0 - prob)
    else:
        value, G, terms = total_loss(logits, Y, lc, return_terms=True)
    grads_a, grads_b, grads_c = {}, {}, {}
    for name in reversed(model.layer_names):
        x = captures[name]
        if name in model.biases:
            grads_c[name] = G.sum(axis=0)
        adapter = model.adapters.get(name)
        if adapter is not None:
            s = adapter.scaling
            u = x @ adapter.a.T
            grads_b[name] = s * (G.T @ u)
            grads_a[name] = s * ((G @ adapter.b).T @ x)
        G = G @ model.effective_weight(name).T
    return value, terms, grads_a, grads_b, grads_c


@dataclass
class TrainResult:
    model: object
    grams: dict
    history: list = field(default_factory=list)

    @property
    def adapters(self):
        return [self.model.adapters[n] for n in self.model.layer_names if n in self.model.adapters]


def _data(task):
    if hasattr(task, "inputs"):
        return as_matrix(task.inputs, "inputs"), as_matrix(task.targets, "targets")
    X, Y = task
    return as_matrix(X, "inputs"), as_matrix(Y, "targets")


def sgd_epochs(model, X, Y, tc, lc, history=None, step0=0):
    """Plain SGD (no momentum) over seeded shuffled mini-batches.

    Returns the updated model; ``model`` itself is not modified.
    """
    rng = np.random.default_rng(tc.seed)
    adapters = {n: LoraAdapter(n, a.a.copy(), a.b.copy(), a.scaling) for n, a in model.adapters.items()}
    biases = {n: b.copy() for n, b in model.biases.items()}
    current = model.with_adapters(adapters, biases)
    n = X.shape[0]
    step = step0
    for epoch in range(tc.epochs):
        lr = lr_at(tc, epoch)
        order = rng.permutation(n)
        for start in range(0, n, tc.batch_size):
            idx = order[start : start + tc.batch_size]
            value, terms, ga, gb, gc = _loss_and_grads(current, X[idx], Y[idx], lc)
            if not math.isfinite(value):
                raise TrainingDiverged(step, value)
            for name, adapter in current.adapters.items():
                adapter.a[...] -= lr * ga[name]
                adapter.b[...] -= lr * gb[name]
            for name, b in current.biases.items():
                b -= lr * gc[name]
            if history is not None:
                history.append(
                    {
                        "epoch": epoch,
                        "step": step,
                        "loss_total": value,
                        "loss_mse": terms["mse"],
                        "loss_focal": terms["focal"],
                        "loss_dice": terms["dice"],
                    }
                )
            step += 1
    return current


def layer_grams(model, X):
    """Per-layer input Grams from a single forward pass."""
    _, captures = forward_capture(model, X, capture=True)
    return {name: gram(c) for name, c in captures.items()}


def train_task(model, task, tc=TrainConfig(), lc=LossConfig()):
    """Fine-tune a copy of ``model`` on ``task`` then compute its layer Grams.

    ``task`` is a TaskDataset or an ``(X, Y)`` pair. Frozen weights are
    shared with the input model and never written.
    """
    X, Y = _data(task)
    if X.shape[0] != Y.shape[0]:
        raise ValueError("inputs and targets have different row counts")
    history = []
    trained = sgd_epochs(model, X, Y, tc, lc, history)
    return TrainResult(trained, layer_grams(trained, X), history)
