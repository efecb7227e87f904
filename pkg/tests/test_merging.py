import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import layer_grams, random_gram, two_layer_checkpoint
from regcl.linalg import GramMatrix, gram
from regcl.merging import (
    MergeConfig,
    MergeState,
    TopologyError,
    fold,
    mean_checkpoints,
    mean_merge_step,
    mean_step,
    merge_adapters,
    merge_batch,
    merge_checkpoints,
    merge_pair,
    refactorize,
    regcl_step,
)
from regcl.model import LINEAR, Checkpoint, LayerParams, LoraAdapter, apply_adapter, build_toy_model, effective_delta


def stacked_oracle(Xs, Ws):
    X = np.vstack(Xs)
    Y = np.vstack([Xi @ Wi for Xi, Wi in zip(Xs, Ws)])
    return np.linalg.lstsq(X, Y, rcond=None)[0]


def objective(W, Xs, Ws):
    return sum(np.linalg.norm(Xi @ W - Xi @ Wi) ** 2 for Xi, Wi in zip(Xs, Ws))


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


# -- closed form --------------------------------------------------------------


def test_pair_identical_models(rng):
    W = rng.normal(size=(4, 2))
    _, C1 = random_gram(rng, 4)
    _, C2 = random_gram(rng, 4)
    assert np.allclose(merge_pair(W, C1, W, C2), W, rtol=0, atol=1e-12)


def test_pair_identity_grams_is_mean(rng):
    W1, W2 = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    I = GramMatrix(np.eye(3))
    assert np.allclose(merge_pair(W1, I, W2, I), (W1 + W2) / 2, rtol=0, atol=1e-15)


def test_pair_matches_stacked_oracle(rng):
    X1, X2 = rng.normal(size=(40, 6)), rng.normal(size=(60, 6))
    W1, W2 = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    W = merge_pair(W1, gram(X1), W2, gram(X2))
    assert rel(W, stacked_oracle([X1, X2], [W1, W2])) <= 1e-8


def test_batch_single_model_exact(rng):
    W = rng.normal(size=(5, 2))
    _, C = random_gram(rng, 5)
    out = merge_batch([(W, C)])
    assert np.array_equal(out, W) and out is not W


def test_batch_two_equals_pair_bitwise(rng):
    W1, W2 = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    _, C1 = random_gram(rng, 5)
    _, C2 = random_gram(rng, 5)
    assert np.array_equal(merge_batch([(W1, C1), (W2, C2)]), merge_pair(W1, C1, W2, C2))


def test_batch_three_objective_and_oracle(rng):
    Xs = [rng.normal(size=(n, 5)) for n in (20, 35, 50)]
    Ws = [rng.normal(size=(5, 4)) for _ in Xs]
    W = merge_batch([(Wi, gram(Xi)) for Wi, Xi in zip(Ws, Xs)])
    assert rel(W, stacked_oracle(Xs, Ws)) <= 1e-8
    assert all(objective(W, Xs, Ws) <= objective(Wi, Xs, Ws) for Wi in Ws)


def test_batch_validation(rng):
    with pytest.raises(ValueError, match="empty"):
        merge_batch([])
    with pytest.raises(ValueError, match="gram shape"):
        merge_batch([(np.eye(3), np.eye(2)), (np.eye(3), np.eye(2))])
    with pytest.raises(ValueError, match="weight shape"):
        merge_batch([(np.eye(3), np.eye(3)), (np.ones((3, 2)), np.eye(3))])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(2, 5), st.floats(0.1, 100.0), st.integers(0, 2**31 - 1))
def test_idempotent_on_copies_and_scale_invariant(m, K, c, seed):
    r = np.random.default_rng(seed)
    W = r.normal(size=(m, 2))
    grams = [gram(r.normal(size=(2 * m + 2, m))) for _ in range(K)]
    assert np.max(np.abs(merge_batch([(W, C) for C in grams]) - W)) <= 1e-10
    Ws = [r.normal(size=(m, 2)) for _ in range(K)]
    base = merge_batch(list(zip(Ws, grams)))
    scaled = merge_batch([(Wi, GramMatrix(c * C.values)) for Wi, C in zip(Ws, grams)])
    assert np.max(np.abs(base - scaled)) <= 1e-8 * max(1.0, np.abs(base).max())


def test_offdiag_zero_is_diagonal_weighted_mean(rng):
    W1, W2 = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    _, C1 = random_gram(rng, 3)
    _, C2 = random_gram(rng, 3)
    d1, d2 = np.diag(C1.values)[:, None], np.diag(C2.values)[:, None]
    out = merge_pair(W1, C1, W2, C2, MergeConfig(offdiag_scale=0.0))
    assert np.allclose(out, (d1 * W1 + d2 * W2) / (d1 + d2), rtol=1e-12)


def test_merge_config_validation():
    with pytest.raises(ValueError):
        MergeConfig(ridge_scale=-1)
    with pytest.raises(ValueError):
        MergeConfig(offdiag_scale=2)
    with pytest.raises(ValueError):
        MergeConfig(lora_strategy="svd")


# -- incremental form ---------------------------------------------------------


def test_first_task_passthrough(rng):
    ckpt = two_layer_checkpoint(rng, task_id="a")
    grams = layer_grams(rng, ckpt)
    state = regcl_step(MergeState(), ckpt, grams)
    assert state.task_count == 1
    assert all(a.same_values(b) for a, b in zip(state.merged.layers, ckpt.layers))
    assert state.merge_history == ["a"]
    for name, C in grams.items():
        assert state.accumulators[name] == C


def test_identity_grams_give_running_mean(rng):
    ckpts = [two_layer_checkpoint(rng, task_id=str(i)) for i in range(4)]
    eye = {layer.name: GramMatrix(np.eye(layer.weight.shape[0]), 1) for layer in ckpts[0].linear_layers()}
    state = fold([(c, eye) for c in ckpts])
    for name in ("l1", "l2", "l1.bias"):
        mean = np.mean([c[name].weight for c in ckpts], axis=0)
        assert np.allclose(state.merged[name].weight, mean, rtol=0, atol=1e-12)


@pytest.mark.parametrize("T", [3, 5])
def test_fold_equals_batch(rng, T):
    ckpts = [two_layer_checkpoint(rng, task_id=str(i)) for i in range(T)]
    grams = [layer_grams(rng, c) for c in ckpts]
    state = fold(list(zip(ckpts, grams)))
    for name in ("l1", "l2"):
        batch = merge_batch([(c[name].weight, g[name]) for c, g in zip(ckpts, grams)])
        assert rel(state.merged[name].weight, batch) <= 1e-10
    assert state.merge_history == [str(i) for i in range(T)]
    assert state.task_count == T
    assert state.accumulators["l1"].sample_count == 30 * T


def test_state_is_not_mutated(rng):
    ckpts = [two_layer_checkpoint(rng) for _ in range(2)]
    s1 = regcl_step(MergeState(), ckpts[0], layer_grams(rng, ckpts[0]))
    before = {k: v.values.copy() for k, v in s1.accumulators.items()}
    merged_before = s1.merged
    s2 = regcl_step(s1, ckpts[1], layer_grams(rng, ckpts[1]))
    assert s2 is not s1 and s1.task_count == 1 and s1.merged is merged_before
    for k, v in s1.accumulators.items():
        assert np.array_equal(v.values, before[k])


def test_state_invariant():
    with pytest.raises(ValueError):
        MergeState(task_count=1)
    with pytest.raises(ValueError):
        MergeState(accumulators={"l": GramMatrix(np.eye(2))})


def test_accumulator_memory_accounting(rng):
    ckpt = two_layer_checkpoint(rng, m=5, n=3, encoder=rng.normal(size=(7, 5)))
    state = fold([(ckpt, layer_grams(rng, ckpt))] * 2)
    assert state.accumulator_float_count() == sum(layer.weight.shape[0] ** 2 for layer in ckpt.linear_layers())
    assert set(state.accumulators) == {"l1", "l2"}


def test_topology_drift_rejected(rng):
    a = two_layer_checkpoint(rng, m=5)
    b = two_layer_checkpoint(rng, m=4)
    state = regcl_step(MergeState(), a, layer_grams(rng, a))
    with pytest.raises(TopologyError, match="topology drift"):
        regcl_step(state, b, layer_grams(rng, b))
    with pytest.raises(TopologyError, match="no gram"):
        regcl_step(state, a, {"l1": layer_grams(rng, a)["l1"]})


def test_frozen_layers_must_match(rng):
    a = two_layer_checkpoint(rng, encoder=np.eye(5))
    b = two_layer_checkpoint(rng, encoder=2 * np.eye(5))
    state = regcl_step(MergeState(), a, layer_grams(rng, a))
    with pytest.raises(TopologyError, match="frozen"):
        regcl_step(state, b, layer_grams(rng, b))
    c = two_layer_checkpoint(rng, encoder=np.eye(5))
    merged = regcl_step(state, c, layer_grams(rng, c)).merged
    assert merged["enc"].weight is a["enc"].weight


def test_regcl_step_requires_dense(rng):
    model = build_toy_model(4, 4, 4, 2, 0)
    ckpt = model.to_checkpoint()
    with pytest.raises(ValueError, match="fold adapters"):
        regcl_step(MergeState(), ckpt, {})


# -- mean path ----------------------------------------------------------------


def test_mean_step_two_terms(rng):
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    assert np.allclose(mean_step(a, b, 2), (a + b) / 2, rtol=0, atol=1e-15)


def test_mean_step_fold_and_fixed_point(rng):
    Ws = [rng.normal(size=(4, 3)) for _ in range(5)]
    acc = Ws[0]
    for t, W in enumerate(Ws[1:], start=2):
        acc = mean_step(acc, W, t)
    assert np.max(np.abs(acc - np.mean(Ws, axis=0))) <= 1e-12
    for t in range(2, 20):
        assert np.array_equal(mean_step(Ws[0], Ws[0], t), Ws[0])
    with pytest.raises(ValueError):
        mean_step(Ws[0], Ws[1], 1)
    with pytest.raises(ValueError, match="shape"):
        mean_step(Ws[0], Ws[0][:2], 2)


def test_mean_merge_state(rng):
    ckpts = [two_layer_checkpoint(rng, task_id=str(i)) for i in range(3)]
    state = MergeState()
    for c in ckpts:
        state = mean_merge_step(state, c)
    assert state.accumulators == {}
    assert np.allclose(state.merged["l2"].weight, np.mean([c["l2"].weight for c in ckpts], axis=0), atol=1e-15)


# -- LoRA strategies ----------------------------------------------------------


def _trained_like(rng, model, scale=0.3):
    adapters = {
        n: LoraAdapter(n, a.a + scale * rng.normal(size=a.a.shape), scale * rng.normal(size=a.b.shape), a.scaling)
        for n, a in model.adapters.items()
    }
    return model.with_adapters(adapters)


@pytest.fixture
def toy():
    return build_toy_model(6, 5, 4, 2, seed=11)


def _captures(rng, ckpt):
    return {layer.name: rng.normal(size=(25, layer.weight.shape[0])) for layer in ckpt.linear_layers()}


@pytest.mark.parametrize("strategy", ["composite", "factor_mean"])
def test_identical_adapters_keep_function(rng, toy, strategy):
    ckpt = _trained_like(rng, toy).to_checkpoint(task_id="a")
    state = MergeState(config=MergeConfig(lora_strategy=strategy))
    for _ in range(3):
        state = merge_adapters(state, ckpt, _captures(rng, ckpt))
    dense_in = apply_adapter(ckpt, ckpt.adapters)
    dense_out = apply_adapter(state.merged, state.merged.adapters)
    for name in ("fc1", "fc2"):
        assert np.max(np.abs(dense_out[name].weight - dense_in[name].weight)) <= 1e-10


def test_composite_single_task_is_exact(rng, toy):
    ckpt = _trained_like(rng, toy).to_checkpoint()
    state = merge_adapters(MergeState(), ckpt, _captures(rng, ckpt))
    for name in ("fc1", "fc2"):
        expect = ckpt[name].weight + effective_delta(ckpt.adapter_for(name))
        assert np.array_equal(state.merged[name].weight, expect)
    assert state.merged.adapters == ()


def test_composite_matches_pair_oracle_and_factor_is_finite(rng, toy):
    c1 = _trained_like(rng, toy).to_checkpoint(task_id="a")
    c2 = _trained_like(rng, toy).to_checkpoint(task_id="b")
    g1, g2 = _captures(rng, c1), _captures(rng, c2)
    comp = fold_adapters([(c1, g1), (c2, g2)], "composite")
    fact = fold_adapters([(c1, g1), (c2, g2)], "factor_mean")
    for name in ("fc1", "fc2"):
        d1 = apply_adapter(c1, c1.adapters)[name].weight
        d2 = apply_adapter(c2, c2.adapters)[name].weight
        oracle = merge_pair(d1, gram(g1[name]), d2, gram(g2[name]))
        assert rel(comp.merged[name].weight, oracle) <= 1e-8
    dense = apply_adapter(fact.merged, fact.merged.adapters)
    assert all(np.all(np.isfinite(layer.weight)) for layer in dense.layers)
    assert len(fact.merged.adapters) == 2
    # Hosts stay untouched under factor_mean.
    assert np.array_equal(fact.merged["fc1"].weight, c1["fc1"].weight)


def fold_adapters(pairs, strategy):
    state = MergeState(config=MergeConfig(lora_strategy=strategy))
    for ckpt, caps in pairs:
        state = merge_adapters(state, ckpt, caps)
    return state


def test_factor_mean_needs_adapters(rng, toy):
    ckpt = apply_adapter(toy.to_checkpoint(), toy.to_checkpoint().adapters)
    with pytest.raises(ValueError, match="adapters"):
        merge_adapters(MergeState(config=MergeConfig(lora_strategy="factor_mean")), ckpt, {})


def test_refactorize_exact_at_full_rank(rng, toy):
    host = apply_adapter(toy.to_checkpoint(), [])
    host = Checkpoint(tuple(l for l in host.layers), (), host.meta)
    merged = host.replace_layers(
        [l.with_weight(l.weight + rng.normal(size=l.weight.shape)) if l.name in ("fc1", "fc2") else l
         for l in host.layers]
    )
    adapters = refactorize(merged, host, rank=5)
    for ad in adapters:
        full = host[ad.layer_name].weight + effective_delta(ad)
        assert np.allclose(full, merged[ad.layer_name].weight, atol=1e-10)


# -- whole-checkpoint helpers --------------------------------------------------


def test_merge_checkpoints_equals_fold(rng):
    ckpts = [two_layer_checkpoint(rng, task_id=str(i), encoder=np.eye(5)) for i in range(3)]
    grams = [layer_grams(rng, c) for c in ckpts]
    batch = merge_checkpoints(ckpts, grams)
    inc = fold(list(zip(ckpts, grams))).merged
    for name in ("l1", "l2"):
        assert rel(batch[name].weight, inc[name].weight) <= 1e-10
    assert np.allclose(batch["l1.bias"].weight, inc["l1.bias"].weight, atol=1e-14)
    assert batch.meta["merge_history"] == ["0", "1", "2"]


def test_mean_checkpoints_fixed_point(rng):
    c = two_layer_checkpoint(rng)
    out = mean_checkpoints([c, c, c])
    assert all(a.same_values(b) for a, b in zip(out.layers, c.layers))
    with pytest.raises(ValueError):
        mean_checkpoints([])


def test_linear_layer_without_frozen_is_merged(rng):
    layer = LayerParams("w", LINEAR, rng.normal(size=(2, 2)))
    ckpt = Checkpoint((layer,))
    assert [l.name for l in ckpt.linear_layers()] == ["w"]
