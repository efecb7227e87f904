import itertools

import numpy as np
import pytest

from conftest import SMALL_TRAIN
from regcl.datasets import DomainSpec, TaskDataset, gen_domain
from regcl.harness import (
    BENCH_REPLAY,
    benchmark,
    derive_seed,
    evaluate,
    replay_finetune,
    run_sequence,
    sample_buffer,
    suite_specs,
    task_train_config,
)
from regcl.merging import MergeState, merge_adapters
from regcl.model import ToyModel
from regcl.training import LossConfig, sgd_epochs, train_task


class LoggingDataset(TaskDataset):
    """Records every read of its rows into a shared log."""

    def __init__(self, ds, log):
        super().__init__(ds.task_id, ds.inputs, ds.targets, ds.split, ds.domain_spec)
        self.log = log

    @property
    def inputs(self):
        self.log.append((self.task_id, self.split))
        return self._inputs

    @property
    def targets(self):
        self.log.append((self.task_id, self.split))
        return self._targets


def test_derive_seed_stable():
    assert derive_seed(1, "polyp") == derive_seed(1, "polyp")
    assert derive_seed(1, "polyp") != derive_seed(2, "polyp")
    assert derive_seed(1, "polyp") != derive_seed(1, "camo")


def test_suite_specs():
    specs = suite_specs("default5", seed=7)
    assert [s.name for s in specs] == ["polyp", "camo", "shadow", "lesion", "cod"]
    assert len({s.seed for s in specs}) == 5
    # Distinct domains differ in at least one distributional parameter.
    for a, b in itertools.combinations(specs, 2):
        assert a.params != b.params
    with pytest.raises(ValueError):
        suite_specs("default9")


def test_frozen_rows_identical(small_tasks, small_base):
    res = run_sequence(small_tasks[:3], "frozen", small_base, SMALL_TRAIN)
    for rm in res.results.values():
        assert np.all(rm.R == rm.R[0])
    assert res.metrics.bwt == 0.0


def test_independent_diagonal(small_tasks, small_base):
    res = run_sequence(small_tasks[:3], "independent", small_base, SMALL_TRAIN, cache={})
    frozen = run_sequence(small_tasks[:3], "frozen", small_base, SMALL_TRAIN)
    R, F = res.results["miou"].R, frozen.results["miou"].R
    off = ~np.eye(3, dtype=bool)
    assert np.array_equal(R[off], F[off])
    assert res.diagonal["miou"] == pytest.approx(np.mean(np.diag(R)))


@pytest.mark.parametrize("strategy", ["regcl", "lora_seq", "mean_merge"])
def test_past_train_rows_never_reread(small_tasks, small_base, strategy):
    log = []
    tasks = [(LoggingDataset(tr, log), LoggingDataset(te, log)) for tr, te in small_tasks[:3]]
    run_sequence(tasks, strategy, small_base, SMALL_TRAIN)
    order = [tid for tid, split in log if split == "train"]
    ids = [tr.task_id for tr, _ in tasks]
    idx = [ids.index(t) for t in order]
    assert idx == sorted(idx)
    assert set(idx) == {0, 1, 2}


def test_regcl_diagonal_invariant_to_future(small_tasks, small_base):
    full = run_sequence(small_tasks[:4], "regcl", small_base, SMALL_TRAIN)
    for t in (2, 3):
        short = run_sequence(small_tasks[:t], "regcl", small_base, SMALL_TRAIN)
        for name, rm in short.results.items():
            assert np.array_equal(np.diag(rm.R), np.diag(full.results[name].R)[:t])


def test_identical_domains_barely_forget(small_base):
    spec = DomainSpec("toy_segmentation", {"grid": 8, "noise": 0.2}, seed=5)
    tr, te = gen_domain(spec, 48, 16)
    tasks = [(tr, te)]
    for name in ("b",):
        tasks.append(
            (TaskDataset(name, tr.inputs, tr.targets, "train", spec), TaskDataset(name, te.inputs, te.targets, "test", spec))
        )
    res = run_sequence(tasks, "regcl", small_base, SMALL_TRAIN)
    R = res.results["miou"].R
    assert R[1, 0] >= R[0, 0] - 0.02


def test_order_independence_small(small_tasks, small_base):
    finals = []
    for perm in ([0, 1, 2], [2, 0, 1], [1, 2, 0]):
        res = run_sequence([small_tasks[i] for i in perm], "regcl", small_base, SMALL_TRAIN)
        finals.append(res.final)
    for other in finals[1:]:
        for layer in finals[0].linear_layers():
            assert np.max(np.abs(layer.weight - other[layer.name].weight)) <= 1e-8


def test_cache_reuses_task_models(small_tasks, small_base):
    cache = {}
    a = run_sequence(small_tasks[:2], "regcl", small_base, SMALL_TRAIN, cache=cache)
    assert len(cache) == 2
    b = run_sequence(small_tasks[:2], "mean_merge", small_base, SMALL_TRAIN, cache=cache)
    assert len(cache) == 2
    assert a.task_checkpoints[0].same_values(b.task_checkpoints[0])


def test_replay_zero_is_plain_regcl(small_tasks, small_base):
    plain = run_sequence(small_tasks[:3], "regcl", small_base, SMALL_TRAIN)
    zero = run_sequence(small_tasks[:3], "regcl", small_base, SMALL_TRAIN, replay_k=0)
    assert plain.final.same_values(zero.final)
    state = plain.state
    assert replay_finetune(state, [], small_tasks[0][0], 0, small_base) is state


def test_replay_first_task_is_extra_training(small_tasks, small_base):
    train, _ = small_tasks[0]
    lc = LossConfig()
    tcfg = task_train_config(SMALL_TRAIN, 0, train.task_id)
    res = train_task(small_base, train, tcfg, lc)
    state = merge_adapters(MergeState(), res.model.to_checkpoint(task_id=train.task_id), res.grams)
    tuned = replay_finetune(state, [], train, 10, small_base, BENCH_REPLAY, lc, seed=0)
    dense = ToyModel.from_checkpoint(state.merged).with_adapters(small_base.adapters)
    manual = sgd_epochs(dense, train.inputs, train.targets, task_train_config(BENCH_REPLAY, 0, train.task_id + "/replay"), lc)
    X = small_tasks[0][1].inputs
    from regcl.model import predict_proba

    assert np.allclose(predict_proba(ToyModel.from_checkpoint(tuned.merged), X), predict_proba(manual, X), atol=1e-12)
    assert tuned.accumulators == state.accumulators


def test_replay_sequence_runs(small_tasks, small_base):
    res = run_sequence(small_tasks[:3], "regcl", small_base, SMALL_TRAIN, replay_k=8)
    assert res.state.task_count == 3
    assert np.all(np.isfinite(res.results["miou"].R))


def test_sample_buffer(small_tasks):
    train, _ = small_tasks[0]
    buf = sample_buffer(train, 5, seed=1)
    assert len(buf) == 5
    assert buf.same_values(sample_buffer(train, 5, seed=1))
    rows = {tuple(r) for r in train.inputs}
    assert all(tuple(r) in rows for r in buf.inputs)
    with pytest.raises(ValueError, match="exceeds"):
        sample_buffer(train, len(train) + 1, 0)
    with pytest.raises(ValueError):
        sample_buffer(train, -1, 0)


def test_run_sequence_validation(small_tasks, small_base):
    with pytest.raises(ValueError, match="unknown strategy"):
        run_sequence(small_tasks, "ewc", small_base)
    with pytest.raises(ValueError, match="at least two"):
        run_sequence(small_tasks[:1], "regcl", small_base)
    with pytest.raises(ValueError, match="unique"):
        run_sequence([small_tasks[0], small_tasks[0]], "regcl", small_base)
    with pytest.raises(ValueError, match="replay"):
        run_sequence(small_tasks, "lora_seq", small_base, replay_k=3)


def test_evaluate_empty_split(small_base, small_tasks):
    _, te = small_tasks[0]
    with pytest.raises(ValueError, match="empty"):
        evaluate(small_base, te.subset(np.array([], dtype=int)))


def test_lora_seq_keeps_adapters(small_tasks, small_base):
    res = run_sequence(small_tasks[:2], "lora_seq", small_base, SMALL_TRAIN)
    assert res.final.adapters == ()
    assert len(res.task_checkpoints[-1].adapters) == 2
    assert res.state is None


def test_benchmark_shape():
    from regcl.harness import ModelConfig

    out = benchmark([0], strategies=("frozen", "regcl"), replay_k=4, tc=SMALL_TRAIN,
                    model_cfg=ModelConfig(hidden=8, rank=2, grid=8, pretrain_samples=64))
    assert set(out) == {"frozen", "regcl", "regcl+replay"}
    assert all(len(v) == 1 for v in out.values())
