import numpy as np
import pytest

from regcl.harness import ModelConfig, base_model, suite_tasks
from regcl.linalg import gram
from regcl.model import Checkpoint, LayerParams, LINEAR, OTHER
from regcl.training import TrainConfig

SMALL_MODEL = ModelConfig(hidden=16, rank=4, grid=8, pretrain_samples=256)
SMALL_TRAIN = TrainConfig(epochs=3, batch_size=8, lr=0.3, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_tasks():
    return suite_tasks("default5", seed=3, n_train=48, n_test=16, grid=8)


@pytest.fixture(scope="session")
def small_base():
    return base_model(3, SMALL_MODEL)


def random_gram(rng, m, n_rows=None):
    X = rng.normal(size=(n_rows or 3 * m, m))
    return X, gram(X)


def two_layer_checkpoint(rng, m=5, n=3, task_id=None, encoder=None):
    """Small checkpoint: optional frozen encoder, two linear layers, one bias."""
    layers = []
    if encoder is not None:
        layers.append(LayerParams("enc", LINEAR, encoder, frozen=True))
    layers += [
        LayerParams("l1", LINEAR, rng.normal(size=(m, m))),
        LayerParams("l1.bias", OTHER, rng.normal(size=(1, m))),
        LayerParams("l2", LINEAR, rng.normal(size=(m, n))),
    ]
    meta = {} if task_id is None else {"task_id": task_id}
    return Checkpoint(tuple(layers), (), meta)


def layer_grams(rng, ckpt, n_rows=30):
    return {layer.name: random_gram(rng, layer.weight.shape[0], n_rows)[1] for layer in ckpt.linear_layers()}


# Acceptance results, filled by tests/test_acceptance.py and printed at the end of the run.
ACCEPTANCE = {}


def record(criterion, ok, detail):
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
    assert ok, detail


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[criterion]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {criterion:>2}  {detail}")
