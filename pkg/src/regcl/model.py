"""Checkpoints, LoRA adapters and the small network used by the benchmark.

Linear layers follow the ``y = W^T x`` convention: a weight of shape
``(m, n)`` maps an ``m``-dimensional input row to ``n`` outputs, so every
Gram used for merging is ``m x m`` over that layer's inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .linalg import as_matrix, solve_spd

LINEAR = "linear"
OTHER = "other"
KINDS = (LINEAR, OTHER)


@dataclass(frozen=True, eq=False)
class LayerParams:
    """One named parameter group of a checkpoint.

    ``kind="linear"`` layers carry a single weight merged through Grams;
    ``kind="other"`` layers (biases and the like) are merged by averaging.
    ``frozen`` layers are never trained and must be identical across every
    checkpoint that enters a merge.
    """

    name: str
    kind: str
    weight: np.ndarray
    aux: tuple = ()
    frozen: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "weight", as_matrix(self.weight, self.name))
        if self.kind == LINEAR and self.aux:
            raise ValueError(f"linear layer {self.name!r} must have exactly one weight matrix")
        object.__setattr__(self, "aux", tuple(as_matrix(a, f"{self.name}.aux") for a in self.aux))

    def with_weight(self, weight):
        return replace(self, weight=weight)

    def same_values(self, other):
        return (
            self.name == other.name
            and self.kind == other.kind
            and self.frozen == other.frozen
            and np.array_equal(self.weight, other.weight)
            and len(self.aux) == len(other.aux)
            and all(np.array_equal(a, b) for a, b in zip(self.aux, other.aux))
        )


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    """Low-rank update for one linear layer.

    ``a`` (r x m) reads the layer input, ``b`` (n x r) writes the output, and
    the dense update is ``scaling * (b @ a).T`` with the host's (m, n) shape.
    """

    layer_name: str
    a: np.ndarray
    b: np.ndarray
    scaling: float = 1.0

    def __post_init__(self):
        a = as_matrix(self.a, f"{self.layer_name}.a")
        b = as_matrix(self.b, f"{self.layer_name}.b")
        if a.shape[0] != b.shape[1]:
            raise ValueError(f"adapter rank mismatch: a is {a.shape}, b is {b.shape}")
        if a.shape[0] > min(a.shape[1], b.shape[0]):
            raise ValueError(f"adapter rank {a.shape[0]} exceeds min{(a.shape[1], b.shape[0])}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "scaling", float(self.scaling))

    @property
    def rank(self):
        return self.a.shape[0]

    @property
    def shape(self):
        return (self.a.shape[1], self.b.shape[0])

    def same_values(self, other):
        return (
            self.layer_name == other.layer_name
            and self.scaling == other.scaling
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.b, other.b)
        )


@dataclass(frozen=True, eq=False)
class Checkpoint:
    layers: tuple
    adapters: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        layers = tuple(self.layers)
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in checkpoint: {names}")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "adapters", tuple(self.adapters))
        meta = dict(self.meta)
        meta.setdefault("merge_history", [])
        object.__setattr__(self, "meta", meta)

    def __getitem__(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def names(self):
        return [layer.name for layer in self.layers]

    def linear_layers(self):
        """Non-frozen linear layers, i.e. the ones merged through Grams."""
        return [layer for layer in self.layers if layer.kind == LINEAR and not layer.frozen]

    def adapter_for(self, name):
        for adapter in self.adapters:
            if adapter.layer_name == name:
                return adapter
        return None

    def replace_layers(self, new_layers, adapters=None, meta=None):
        return Checkpoint(
            tuple(new_layers),
            self.adapters if adapters is None else tuple(adapters),
            dict(self.meta) if meta is None else meta,
        )

    def same_values(self, other):
        return (
            len(self.layers) == len(other.layers)
            and all(a.same_values(b) for a, b in zip(self.layers, other.layers))
            and len(self.adapters) == len(other.adapters)
            and all(a.same_values(b) for a, b in zip(self.adapters, other.adapters))
            and self.meta == other.meta
        )


def init_adapter(layer_shape, rank, seed, scaling=1.0, layer_name=""):
    """Kaiming-uniform ``a`` from ``seed`` and an all-zero ``b``.

    Starting from ``b = 0`` makes the initial update exactly zero, so every
    task model starts from the same function.
    """
    m, n = layer_shape
    if rank < 1 or rank > min(m, n):
        raise ValueError(f"rank {rank} out of range for layer shape {(m, n)}")
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / m)
    a = rng.uniform(-bound, bound, size=(rank, m))
    b = np.zeros((n, rank))
    return LoraAdapter(layer_name, a, b, scaling)


def effective_delta(adapter):
    return adapter.scaling * (adapter.b @ adapter.a).T


def apply_adapter(checkpoint, adapters):
    """Fold ``adapters`` into their host weights.

    Adapters that the checkpoint itself carries are consumed; the input
    checkpoint is left untouched.
    """
    deltas = {}
    for adapter in adapters:
        try:
            host = checkpoint[adapter.layer_name]
        except KeyError:
            raise KeyError(f"adapter targets unknown layer {adapter.layer_name!r}") from None
        if host.kind != LINEAR:
            raise ValueError(f"adapter targets non-linear layer {adapter.layer_name!r}")
        if adapter.shape != host.weight.shape:
            raise ValueError(
                f"adapter shape {adapter.shape} does not match layer {host.name} {host.weight.shape}"
            )
        delta = effective_delta(adapter)
        if adapter.layer_name in deltas:
            deltas[adapter.layer_name] = deltas[adapter.layer_name] + delta
        else:
            deltas[adapter.layer_name] = delta
    new_layers = [
        layer.with_weight(layer.weight + deltas[layer.name]) if layer.name in deltas else layer
        for layer in checkpoint.layers
    ]
    used = {id(a) for a in adapters}
    kept = [a for a in checkpoint.adapters if id(a) not in used]
    return checkpoint.replace_layers(new_layers, adapters=kept)


@dataclass(eq=False)
class ToyModel:
    """Frozen tanh encoder followed by a stack of LoRA-adapted linear layers.

    ``hosts`` maps layer name to its frozen base weight; ``biases`` holds the
    trainable bias rows. The stack is purely linear after the encoder and the
    final logits go through ``output`` ("sigmoid" or "identity") downstream.
    """

    encoder: Optional[np.ndarray]
    hosts: dict
    biases: dict
    adapters: dict
    output: str = "sigmoid"

    @property
    def layer_names(self):
        return list(self.hosts)

    @property
    def input_dim(self):
        if self.encoder is not None:
            return self.encoder.shape[0]
        return next(iter(self.hosts.values())).shape[0]

    @property
    def output_dim(self):
        return list(self.hosts.values())[-1].shape[1]

    def effective_weight(self, name):
        W = self.hosts[name]
        adapter = self.adapters.get(name)
        if adapter is None:
            return W
        return W + effective_delta(adapter)

    def with_adapters(self, adapters, biases=None):
        return ToyModel(
            self.encoder,
            self.hosts,
            dict(self.biases if biases is None else biases),
            dict(adapters),
            self.output,
        )

    def to_checkpoint(self, **meta):
        layers = []
        if self.encoder is not None:
            layers.append(LayerParams("encoder", LINEAR, self.encoder, frozen=True))
        for name, W in self.hosts.items():
            layers.append(LayerParams(name, LINEAR, W))
            if name in self.biases:
                layers.append(LayerParams(f"{name}.bias", OTHER, self.biases[name][None, :]))
        meta = dict(meta)
        meta["architecture"] = {
            "encoder": self.encoder is not None,
            "adapted": self.layer_names,
            "output": self.output,
        }
        adapters = tuple(self.adapters[n] for n in self.hosts if n in self.adapters)
        return Checkpoint(tuple(layers), adapters, meta)

    @classmethod
    def from_checkpoint(cls, checkpoint):
        arch = checkpoint.meta.get("architecture")
        if arch is None:
            raise ValueError("checkpoint has no architecture metadata")
        encoder = checkpoint["encoder"].weight if arch["encoder"] else None
        hosts, biases, adapters = {}, {}, {}
        for name in arch["adapted"]:
            hosts[name] = checkpoint[name].weight
            if f"{name}.bias" in checkpoint.names:
                biases[name] = checkpoint[f"{name}.bias"].weight[0]
            adapter = checkpoint.adapter_for(name)
            if adapter is not None:
                adapters[name] = adapter
        return cls(encoder, hosts, biases, adapters, arch["output"])


def build_toy_model(
    input_dim,
    hidden_dim,
    output_dim,
    rank,
    seed,
    lora_scaling=1.0,
    host_gain=1.0,
    encoder=True,
    n_adapted=2,
    output="sigmoid",
    bias=True,
):
    """Seeded toy network: ``tanh(x E)`` then ``n_adapted`` adapted linear layers.

    All frozen weights (encoder and host layers) come from ``seed``; adapter
    ``a`` factors use per-layer child seeds. ``host_gain`` scales the frozen
    host weights (0 gives a zero host, so the adapters carry the whole map).
    """
    seq = np.random.SeedSequence(seed)
    enc_seq, host_seq, adapter_seq = seq.spawn(3)
    rng = np.random.default_rng(enc_seq)
    E = None
    width = input_dim
    if encoder:
        E = rng.normal(0.0, np.sqrt(2.0 / input_dim), size=(input_dim, hidden_dim))
        width = hidden_dim
    dims = [width] + [hidden_dim] * (n_adapted - 1) + [output_dim]
    host_rng = np.random.default_rng(host_seq)
    hosts, biases, adapters = {}, {}, {}
    child_seeds = adapter_seq.spawn(n_adapted)
    for i in range(n_adapted):
        name = f"fc{i + 1}"
        m, n = dims[i], dims[i + 1]
        hosts[name] = host_gain * host_rng.normal(0.0, np.sqrt(1.0 / m), size=(m, n))
        if bias:
            biases[name] = np.zeros(n)
        r = min(rank, m, n)
        adapters[name] = init_adapter((m, n), r, child_seeds[i], lora_scaling, name)
    return ToyModel(E, hosts, biases, adapters, output)


def encode(model, X):
    if model.encoder is None:
        return X
    return np.tanh(X @ model.encoder)


def forward_capture(model, X, capture=True):
    """Run ``model`` on the rows of ``X``.

    Returns ``(logits, captures)`` where ``captures[name]`` is the exact
    ``N x m`` input block each adapted layer saw (empty dict when
    ``capture`` is false).
    """
    X = as_matrix(X)
    if X.shape[1] != model.input_dim:
        raise ValueError(f"input has {X.shape[1]} columns, model expects {model.input_dim}")
    captures = {}
    h = encode(model, X)
    for name in model.hosts:
        if capture:
            captures[name] = h
        h = h @ model.effective_weight(name)
        if name in model.biases:
            h = h + model.biases[name]
    return h, captures


def activate(model, logits):
    if model.output == "sigmoid":
        return sigmoid(logits)
    return logits


def sigmoid(z):
    # Split on sign to avoid overflow in exp for large |z|.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def predict_proba(model, X):
    logits, _ = forward_capture(model, X, capture=False)
    return activate(model, logits)


def pretrain_host(model, X, Y, ridge_scale=1e-3, logit_scale=2.0):
    """Give ``model`` a frozen "pretrained" host.

    Hidden adapted layers become identity maps and the last host layer (plus
    its bias) is the ridge least-squares readout of ``logit_scale * (2Y - 1)``
    from the encoder features of ``X``. Adapters are kept as they are.
    """
    names = model.layer_names
    hosts = dict(model.hosts)
    for name in names[:-1]:
        m, n = hosts[name].shape
        if m != n:
            raise ValueError(f"hidden layer {name} is not square; cannot use an identity host")
        hosts[name] = np.eye(m)
    Z = encode(model, as_matrix(X))
    Zb = np.hstack([Z, np.ones((Z.shape[0], 1))])
    T = logit_scale * (2.0 * as_matrix(Y, "Y") - 1.0)
    A = Zb.T @ Zb
    coef = solve_spd(A, Zb.T @ T, ridge_scale)
    last = names[-1]
    hosts[last] = coef[:-1]
    biases = dict(model.biases)
    biases[last] = coef[-1].copy()
    for name in names[:-1]:
        if name in biases:
            biases[name] = np.zeros_like(biases[name])
    return ToyModel(model.encoder, hosts, biases, dict(model.adapters), model.output)
