"""Closed-form regression-mean merging and its incremental continual form.

Batch form over K models with input Grams ``C_i``::

    W = (sum C_i)^-1 sum C_i W_i

Incremental form with accumulator ``P_t = C_1 + ... + C_{t-1}``::

    W_t_bar = (P_t + C_t)^-1 (P_t W_{t-1}_bar + C_t W_t)
    P_{t+1} = P_t + C_t

Parameters without a Gram-compatible input (biases) use the running mean
``((t-1) W_{t-1}_bar + W_t) / t``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .linalg import DEFAULT_RIDGE_SCALE, GramMatrix, as_matrix, gram, scale_offdiag, solve_spd
from .model import LINEAR, OTHER, Checkpoint, LayerParams, LoraAdapter, apply_adapter

LORA_STRATEGIES = ("composite", "factor_mean")


class TopologyError(ValueError):
    """Checkpoints entering a merge do not share one layer layout."""


@dataclass(frozen=True)
class MergeConfig:
    ridge_scale: float = DEFAULT_RIDGE_SCALE
    offdiag_scale: float = 1.0
    lora_strategy: str = "composite"

    def __post_init__(self):
        if not self.ridge_scale >= 0:
            raise ValueError("ridge_scale must be nonnegative")
        if not 0.0 <= self.offdiag_scale <= 1.0:
            raise ValueError("offdiag_scale must lie in [0, 1]")
        if self.lora_strategy not in LORA_STRATEGIES:
            raise ValueError(f"lora_strategy must be one of {LORA_STRATEGIES}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class MergeState:
    """Everything carried between incremental merges.

    Only Grams and weights live here; no input rows are ever stored.
    """

    accumulators: dict = field(default_factory=dict)
    merged: Optional[Checkpoint] = None
    task_count: int = 0
    config: MergeConfig = field(default_factory=MergeConfig)

    def __post_init__(self):
        if (self.task_count == 0) != (self.merged is None):
            raise ValueError("task_count must be 0 exactly when no merged checkpoint exists")
        if self.task_count == 0 and any(np.any(g.values) for g in self.accumulators.values()):
            raise ValueError("fresh merge state must have zero accumulators")

    @property
    def merge_history(self):
        return [] if self.merged is None else list(self.merged.meta["merge_history"])

    def accumulator_float_count(self):
        return sum(g.values.size for g in self.accumulators.values())


def _gram_values(C):
    return C.values if isinstance(C, GramMatrix) else as_matrix(C, "gram")


def merge_batch(models, cfg=None):
    """Merge ``[(W_i, C_i), ...]`` into one weight matrix.

    A single model is returned as a copy without solving.
    """
    cfg = cfg or MergeConfig()
    models = list(models)
    if not models:
        raise ValueError("cannot merge an empty list of models")
    Ws = [as_matrix(W, "W") for W, _ in models]
    Cs = [_gram_values(C) for _, C in models]
    m, n = Ws[0].shape
    for W, C in zip(Ws, Cs):
        if W.shape != (m, n):
            raise ValueError(f"weight shape {W.shape} differs from {(m, n)}")
        if C.shape != (m, m):
            raise ValueError(f"gram shape {C.shape} does not match weight input dim {m}")
    if len(models) == 1:
        return Ws[0].copy()
    Cs = [scale_offdiag(C, cfg.offdiag_scale) for C in Cs]
    total = Cs[0]
    rhs = Cs[0] @ Ws[0]
    for W, C in zip(Ws[1:], Cs[1:]):
        total = total + C
        rhs = rhs + C @ W
    return solve_spd(total, rhs, cfg.ridge_scale)


def merge_pair(W1, C1, W2, C2, cfg=None):
    return merge_batch([(W1, C1), (W2, C2)], cfg)


def mean_step(prev, W_t, t):
    """Fold ``W_t`` into the running mean of ``t - 1`` earlier tensors.

    Evaluated as ``prev + (W_t - prev) / t``, algebraically equal to
    ``((t - 1) prev + W_t) / t`` but exact when ``W_t == prev``.
    """
    if t < 2:
        raise ValueError(f"mean_step needs t >= 2, got {t}")
    prev = np.asarray(prev, dtype=np.float64)
    W_t = np.asarray(W_t, dtype=np.float64)
    if prev.shape != W_t.shape:
        raise ValueError(f"shape mismatch: {prev.shape} vs {W_t.shape}")
    return prev + (W_t - prev) / t


def _check_topology(merged, incoming):
    if merged.names != incoming.names:
        raise TopologyError(
            f"checkpoint topology drift: layers {incoming.names} vs {merged.names}"
        )
    for old, new in zip(merged.layers, incoming.layers):
        if old.kind != new.kind or old.frozen != new.frozen or old.weight.shape != new.weight.shape:
            raise TopologyError(f"checkpoint topology drift at layer {new.name!r}")
        if len(old.aux) != len(new.aux) or any(a.shape != b.shape for a, b in zip(old.aux, new.aux)):
            raise TopologyError(f"checkpoint topology drift in aux of {new.name!r}")
        if old.frozen and not old.same_values(new):
            raise TopologyError(f"frozen layer {new.name!r} differs between checkpoints")


def _check_grams(checkpoint, grams):
    for layer in checkpoint.linear_layers():
        if layer.name not in grams:
            raise TopologyError(f"checkpoint topology drift: no gram for linear layer {layer.name!r}")
        if grams[layer.name].dim != layer.weight.shape[0]:
            raise TopologyError(
                f"gram for {layer.name!r} has dim {grams[layer.name].dim}, "
                f"layer input dim is {layer.weight.shape[0]}"
            )


def regcl_step(state, W_t, C_t):
    """Merge task checkpoint ``W_t`` (with its layer Grams ``C_t``) into ``state``.

    Returns a new state; ``state`` itself is not modified.
    """
    if W_t.adapters:
        raise ValueError("fold adapters into the checkpoint before calling regcl_step")
    _check_grams(W_t, C_t)
    cfg = state.config
    t = state.task_count + 1
    task_id = W_t.meta.get("task_id", str(t))
    linear_names = [layer.name for layer in W_t.linear_layers()]

    if state.task_count == 0:
        meta = dict(W_t.meta)
        meta["merge_history"] = list(W_t.meta.get("merge_history", [])) + [task_id]
        merged = W_t.replace_layers(W_t.layers, meta=meta)
        accumulators = {name: C_t[name] for name in linear_names}
        return MergeState(accumulators, merged, 1, cfg)

    prev = state.merged
    _check_topology(prev, W_t)
    if set(state.accumulators) != set(linear_names):
        raise TopologyError("checkpoint topology drift: accumulator layers differ from checkpoint")

    new_layers = []
    for old, new in zip(prev.layers, W_t.layers):
        if old.frozen:
            new_layers.append(old)
        elif old.kind == LINEAR:
            P = scale_offdiag(state.accumulators[old.name].values, cfg.offdiag_scale)
            C = scale_offdiag(C_t[old.name].values, cfg.offdiag_scale)
            W = solve_spd(P + C, P @ old.weight + C @ new.weight, cfg.ridge_scale)
            new_layers.append(old.with_weight(W))
        else:
            aux = tuple(mean_step(a, b, t) for a, b in zip(old.aux, new.aux))
            new_layers.append(replace(old, weight=mean_step(old.weight, new.weight, t), aux=aux))

    meta = dict(prev.meta)
    meta["merge_history"] = list(prev.meta["merge_history"]) + [task_id]
    accumulators = {name: state.accumulators[name] + C_t[name] for name in linear_names}
    return MergeState(accumulators, prev.replace_layers(new_layers, meta=meta), t, cfg)


def mean_merge_step(state, W_t):
    """Running arithmetic mean of every trainable parameter (no Grams).

    Used by the weight-averaging baseline; the state's accumulators stay empty.
    """
    if W_t.adapters:
        raise ValueError("fold adapters into the checkpoint before averaging")
    t = state.task_count + 1
    task_id = W_t.meta.get("task_id", str(t))
    if state.task_count == 0:
        meta = dict(W_t.meta)
        meta["merge_history"] = [task_id]
        return MergeState({}, W_t.replace_layers(W_t.layers, meta=meta), 1, state.config)
    prev = state.merged
    _check_topology(prev, W_t)
    new_layers = []
    for old, new in zip(prev.layers, W_t.layers):
        if old.frozen:
            new_layers.append(old)
            continue
        aux = tuple(mean_step(a, b, t) for a, b in zip(old.aux, new.aux))
        new_layers.append(replace(old, weight=mean_step(old.weight, new.weight, t), aux=aux))
    meta = dict(prev.meta)
    meta["merge_history"] = list(prev.meta["merge_history"]) + [task_id]
    return MergeState({}, prev.replace_layers(new_layers, meta=meta), t, state.config)


# -- LoRA-specific strategies ------------------------------------------------

_B_SUFFIX = ".lora_b"
_HOST_SUFFIX = ".host"


def _to_factor_form(checkpoint):
    """Re-express an adapted checkpoint so ``a^T`` sits on the linear path.

    ``a`` reads the layer input, so its transpose is an ``m x r`` linear
    weight whose Gram is the host layer's input Gram. ``b`` becomes an
    averaged parameter and the host weight a frozen layer.
    """
    layers = []
    for layer in checkpoint.layers:
        adapter = checkpoint.adapter_for(layer.name)
        if adapter is None or layer.kind != LINEAR:
            layers.append(layer)
            continue
        layers.append(LayerParams(layer.name + _HOST_SUFFIX, LINEAR, layer.weight, frozen=True))
        layers.append(LayerParams(layer.name, LINEAR, adapter.a.T))
        layers.append(LayerParams(layer.name + _B_SUFFIX, OTHER, adapter.b, aux=(np.array([[adapter.scaling]]),)))
    return Checkpoint(tuple(layers), (), dict(checkpoint.meta))


def _from_factor_form(factor):
    layers, adapters = [], []
    by_name = {layer.name: layer for layer in factor.layers}
    for layer in factor.layers:
        if layer.name.endswith(_B_SUFFIX):
            continue
        if layer.name.endswith(_HOST_SUFFIX):
            base = layer.name[: -len(_HOST_SUFFIX)]
            layers.append(LayerParams(base, LINEAR, layer.weight))
            b_layer = by_name[base + _B_SUFFIX]
            adapters.append(
                LoraAdapter(base, by_name[base].weight.T, b_layer.weight, float(b_layer.aux[0][0, 0]))
            )
            continue
        if layer.name + _HOST_SUFFIX in by_name:
            continue
        layers.append(layer)
    return Checkpoint(tuple(layers), tuple(adapters), dict(factor.meta))


def merge_adapters(state, checkpoint, grams):
    """Merge a LoRA-adapted task checkpoint according to ``state.config.lora_strategy``.

    ``grams`` maps each adapted layer to the Gram of its inputs; raw capture
    matrices are accepted too and reduced to Grams here.

    * ``composite``: fold each adapter into its host and merge the dense
      effective weights. The merged checkpoint holds full weights.
    * ``factor_mean``: merge ``a`` through the Gram path and average ``b``.
      The merged checkpoint keeps host weights plus merged adapters.
    """
    grams = {k: v if isinstance(v, GramMatrix) else gram(v) for k, v in grams.items()}
    strategy = state.config.lora_strategy
    if strategy == "composite":
        return regcl_step(state, apply_adapter(checkpoint, checkpoint.adapters), grams)
    if strategy != "factor_mean":
        raise ValueError(f"unknown lora strategy {strategy!r}")
    if not checkpoint.adapters:
        raise ValueError("factor_mean merging needs a checkpoint with adapters")
    factor = _to_factor_form(checkpoint)
    inner = state
    if state.merged is not None:
        if len(state.merged.adapters) != len(checkpoint.adapters):
            raise TopologyError("checkpoint topology drift: adapter sets differ")
        inner = replace(state, merged=_to_factor_form(state.merged))
    out = regcl_step(inner, factor, grams)
    return replace(out, merged=_from_factor_form(out.merged))


def refactorize(merged, host, rank, scaling=1.0):
    """Truncated-SVD low-rank export of ``merged - host`` per linear layer.

    Only meant for exporting compact adapters; evaluation always uses the
    full merged weights.
    """
    adapters = []
    for layer in host.linear_layers():
        delta = merged[layer.name].weight - layer.weight
        U, s, Vt = np.linalg.svd(delta, full_matrices=False)
        r = min(rank, s.size)
        root = np.sqrt(s[:r])
        b = Vt[:r].T * root
        a = (root[:, None] * U[:, :r].T) / scaling
        adapters.append(LoraAdapter(layer.name, a, b, scaling))
    return adapters


def fold(models_and_grams, cfg=None):
    """Run ``regcl_step`` over a sequence of ``(checkpoint, grams)`` pairs."""
    state = MergeState(config=cfg or MergeConfig())
    for ckpt, grams in models_and_grams:
        state = regcl_step(state, ckpt, grams)
    return state


def _dense(ckpt):
    return apply_adapter(ckpt, ckpt.adapters) if ckpt.adapters else ckpt


def merge_checkpoints(checkpoints, grams, cfg=None):
    """One-shot batch merge of K checkpoints (adapters folded first).

    Linear layers use the Gram-weighted closed form, other parameters the
    arithmetic mean, frozen layers must agree exactly.
    """
    cfg = cfg or MergeConfig()
    ckpts = [_dense(c) for c in checkpoints]
    if not ckpts:
        raise ValueError("cannot merge an empty list of checkpoints")
    if len(grams) != len(ckpts):
        raise ValueError("need one gram map per checkpoint")
    first = ckpts[0]
    for ckpt, g in zip(ckpts, grams):
        _check_topology(first, ckpt)
        _check_grams(ckpt, g)
    new_layers = []
    for i, layer in enumerate(first.layers):
        group = [c.layers[i] for c in ckpts]
        if layer.frozen:
            new_layers.append(layer)
        elif layer.kind == LINEAR:
            W = merge_batch([(lp.weight, g[layer.name]) for lp, g in zip(group, grams)], cfg)
            new_layers.append(layer.with_weight(W))
        else:
            weight = np.mean([lp.weight for lp in group], axis=0)
            aux = tuple(np.mean([lp.aux[j] for lp in group], axis=0) for j in range(len(layer.aux)))
            new_layers.append(replace(layer, weight=weight, aux=aux))
    meta = dict(first.meta)
    meta["merge_history"] = [c.meta.get("task_id", str(i + 1)) for i, c in enumerate(ckpts)]
    return first.replace_layers(new_layers, meta=meta)


def mean_checkpoints(checkpoints):
    """Plain arithmetic mean of every non-frozen parameter."""
    state = MergeState()
    for ckpt in checkpoints:
        state = mean_merge_step(state, _dense(ckpt))
    if state.merged is None:
        raise ValueError("cannot average an empty list of checkpoints")
    return state.merged
