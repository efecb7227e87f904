"""Domain-incremental benchmark runner.

A run trains one toy model per task from the shared initial weights and
combines them according to a strategy:

``regcl``       incremental Gram-weighted merge after every task
``lora_seq``    keep training the same adapters task after task
``mean_merge``  running arithmetic mean of the independent task models
``independent`` each task's own model (upper-bound diagonal)
``frozen``      the untrained initial model

After each training step the current model is scored on every task's test
split, filling one row of the result matrices.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .datasets import DomainSpec, gen_domain
from .merging import MergeConfig, MergeState, mean_merge_step, merge_adapters
from .metrics import METRIC_NAMES, ResultMatrix, score_probabilities, summarize
from .model import ToyModel, apply_adapter, build_toy_model, predict_proba, pretrain_host
from .training import LossConfig, TrainConfig, TrainingDiverged, sgd_epochs, train_task

STRATEGIES = ("regcl", "lora_seq", "mean_merge", "independent", "frozen")

# Five toy domains standing in for the polyp -> camouflage -> shadow ->
# skin lesion -> camouflage sequence. Foreground is brighter than background
# everywhere (one shared label space); shape, offset, contrast and noise vary.
DEFAULT5 = (
    ("polyp", {"shape": "disk", "fg": 1.0, "bg": -0.5, "noise": 0.3}),
    ("camo", {"shape": "ellipse", "fg": 0.4, "bg": 0.0, "noise": 0.4}),
    ("shadow", {"shape": "square", "fg": 0.5, "bg": -1.0, "noise": 0.2}),
    ("lesion", {"shape": "ellipse", "fg": 1.2, "bg": 0.4, "noise": 0.3, "size_min": 4.0, "size_max": 6.0}),
    ("cod", {"shape": "triangle", "fg": 0.3, "bg": -0.2, "noise": 0.4}),
)
PRETRAIN_DOMAIN = {"shape": "square", "fg": 1.0, "bg": 0.0, "noise": 0.2, "size_min": 2.0, "size_max": 6.0}
SUITES = ("default5",)


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 64
    rank: int = 16
    lora_scaling: float = 1.0
    grid: int = 16
    pretrain_samples: int = 1024
    pretrain_ridge: float = 1e-3

    def to_dict(self):
        return asdict(self)


# Plain SGD on mean-reduced losses needs a far larger step than the
# adaptive optimizers the 0.005 default was tuned for.
BENCH_TRAIN = TrainConfig(lr=0.3)
# Replay is a short, gentle pass over buffers + current task; a full-length
# pass at the task learning rate overfits the current task.
BENCH_REPLAY = TrainConfig(epochs=3, lr=0.03)
N_TRAIN = 512
N_TEST = 128


def derive_seed(*parts):
    """Stable 32-bit seed from integers and strings (strings via CRC32)."""
    ints = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


def suite_specs(name="default5", seed=0, grid=16):
    if name != "default5":
        raise ValueError(f"unknown suite {name!r}; expected one of {SUITES}")
    return [
        DomainSpec("toy_segmentation", {**params, "grid": grid}, derive_seed(seed, "domain", i), task_name)
        for i, (task_name, params) in enumerate(DEFAULT5)
    ]


def suite_tasks(name="default5", seed=0, n_train=N_TRAIN, n_test=N_TEST, grid=16):
    return [gen_domain(spec, n_train, n_test) for spec in suite_specs(name, seed, grid)]


def base_model(seed=0, mc=ModelConfig()):
    """Initial weights shared by every task of a run.

    The frozen host stands in for a pretrained model: a seeded tanh encoder,
    an identity hidden layer and a readout fitted on a generic pretraining
    domain that is not part of any task sequence.
    """
    d = mc.grid * mc.grid
    model = build_toy_model(d, mc.hidden, d, mc.rank, seed, mc.lora_scaling)
    spec = DomainSpec(
        "toy_segmentation", {**PRETRAIN_DOMAIN, "grid": mc.grid}, derive_seed(seed, "pretrain"), "pretrain"
    )
    pre, _ = gen_domain(spec, mc.pretrain_samples, 1)
    return pretrain_host(model, pre.inputs, pre.targets, mc.pretrain_ridge)


def evaluate(model, test):
    """``{"miou", "mf1", "mmae"}`` of ``model`` (ToyModel or Checkpoint) on ``test``."""
    if not isinstance(model, ToyModel):
        model = ToyModel.from_checkpoint(model)
    if len(test) == 0:
        raise ValueError(f"test split of {test.task_id!r} is empty")
    return score_probabilities(predict_proba(model, test.inputs), test.targets)


def task_train_config(tc, seed, task_id):
    return replace(tc, seed=derive_seed(tc.seed, seed, task_id))


def sample_buffer(task, k, seed):
    """Uniform sample of ``k`` rows without replacement."""
    if k < 0:
        raise ValueError("replay size must be >= 0")
    if k > len(task):
        raise ValueError(f"replay size {k} exceeds the {len(task)} samples of {task.task_id!r}")
    idx = np.sort(np.random.default_rng(derive_seed(seed, task.task_id, "replay")).choice(len(task), k, replace=False))
    return task.subset(idx)


def _fresh_adapters(base):
    return {name: a for name, a in base.adapters.items()}


def replay_finetune(state, buffers, current, k, base, tc=BENCH_REPLAY, lc=LossConfig(), seed=0):
    """Fine-tune the merged model on the replay buffers plus ``current``.

    ``k == 0`` disables replay and returns ``state`` unchanged. A dense
    (composite) merged checkpoint gets fresh zero-delta adapters from
    ``base`` for the fine-tune, which are folded back afterwards.
    """
    if k == 0:
        return state
    if k > len(current):
        raise ValueError(f"replay size {k} exceeds the {len(current)} samples of {current.task_id!r}")
    X = np.vstack([b.inputs for b in buffers] + [current.inputs])
    Y = np.vstack([b.targets for b in buffers] + [current.targets])
    merged = state.merged
    model = ToyModel.from_checkpoint(merged)
    dense = not merged.adapters
    if dense:
        model = model.with_adapters(_fresh_adapters(base))
    tuned = sgd_epochs(model, X, Y, task_train_config(tc, seed, current.task_id + "/replay"), lc)
    ckpt = tuned.to_checkpoint(**{k_: v for k_, v in merged.meta.items() if k_ != "architecture"})
    if dense:
        ckpt = apply_adapter(ckpt, ckpt.adapters)
    return replace(state, merged=ckpt)


@dataclass
class SequenceResult:
    strategy: str
    task_ids: list
    results: dict
    metrics: object
    final: object
    state: Optional[MergeState] = None
    diagonal: dict = field(default_factory=dict)
    task_checkpoints: list = field(default_factory=list)
    states: list = field(default_factory=list)


def _train_independent(base, train, tc, lc, seed, cache):
    tcfg = task_train_config(tc, seed, train.task_id)
    key = (train.task_id, tcfg, lc)
    if cache is not None and key in cache:
        return cache[key]
    result = train_task(base, train, tcfg, lc)
    if cache is not None:
        cache[key] = result
    return result


def run_sequence(
    tasks,
    strategy,
    base,
    tc=BENCH_TRAIN,
    lc=LossConfig(),
    mc=MergeConfig(),
    replay_k=None,
    seed=0,
    cache=None,
    replay_tc=BENCH_REPLAY,
):
    """Run one strategy over ``tasks`` (a list of ``(train, test)`` pairs).

    ``cache`` may be a dict shared between calls that use the same ``base``;
    independently trained task models are then reused across strategies.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if len(tasks) < 2:
        raise ValueError("a sequence needs at least two tasks")
    if replay_k and strategy != "regcl":
        raise ValueError("replay is only defined on top of the regcl strategy")
    task_ids = [train.task_id for train, _ in tasks]
    if len(set(task_ids)) != len(task_ids):
        raise ValueError(f"task ids must be unique, got {task_ids}")
    tests = [test for _, test in tasks]
    T = len(tasks)
    R = {name: np.zeros((T, T)) for name in METRIC_NAMES}

    def fill_row(i, model, only=None):
        for j, test in enumerate(tests):
            if only is not None and j != only:
                continue
            for name, value in evaluate(model, test).items():
                R[name][i, j] = value

    state = None
    states, task_ckpts = [], []
    diagonal = {}
    final = None

    if strategy in ("frozen", "independent"):
        frozen_scores = [evaluate(base, test) for test in tests]
        for i in range(T):
            for j in range(T):
                for name in METRIC_NAMES:
                    R[name][i, j] = frozen_scores[j][name]

    buffers = []
    current = base
    for i, (train, test) in enumerate(tasks):
        try:
            if strategy == "frozen":
                final = base.to_checkpoint()
                continue
            if strategy == "lora_seq":
                current = sgd_epochs(current, train.inputs, train.targets, task_train_config(tc, seed, train.task_id), lc)
                ckpt = current.to_checkpoint(task_id=train.task_id)
                task_ckpts.append(ckpt)
                final = apply_adapter(ckpt, ckpt.adapters)
                fill_row(i, current)
                continue

            result = _train_independent(base, train, tc, lc, seed, cache)
            ckpt = result.model.to_checkpoint(task_id=train.task_id)
            task_ckpts.append(ckpt)
            if strategy == "independent":
                own = evaluate(result.model, test)
                for name in METRIC_NAMES:
                    R[name][i, i] = own[name]
                    diagonal.setdefault(name, []).append(own[name])
                final = apply_adapter(ckpt, ckpt.adapters)
                continue
            if strategy == "mean_merge":
                state = mean_merge_step(state or MergeState(config=mc), apply_adapter(ckpt, ckpt.adapters))
            else:
                state = merge_adapters(state or MergeState(config=mc), ckpt, result.grams)
                if replay_k:
                    buffers.append(sample_buffer(train, replay_k, seed))
                    state = replay_finetune(state, buffers[:-1], train, replay_k, base, replay_tc, lc, seed)
            states.append(state)
            final = state.merged
            fill_row(i, ToyModel.from_checkpoint(state.merged))
        except TrainingDiverged as exc:
            raise TrainingDiverged(exc.step, task=f"{i} ({train.task_id})") from exc

    results = {name: ResultMatrix(R[name], name, task_ids) for name in METRIC_NAMES}
    return SequenceResult(
        strategy,
        task_ids,
        results,
        summarize(results),
        final,
        state,
        {k: float(np.mean(v)) for k, v in diagonal.items()},
        task_ckpts,
        states,
    )


def benchmark(seeds, strategies=STRATEGIES, replay_k=None, tc=BENCH_TRAIN, lc=LossConfig(), mc=MergeConfig(),
              model_cfg=ModelConfig(), suite="default5", replay_tc=BENCH_REPLAY):
    """Run ``strategies`` (plus ``regcl+replay`` when ``replay_k``) for each seed.

    Returns ``{strategy: [SequenceResult per seed]}``.
    """
    out = {s: [] for s in strategies}
    if replay_k:
        out["regcl+replay"] = []
    for seed in seeds:
        tasks = suite_tasks(suite, seed, grid=model_cfg.grid)
        base = base_model(seed, model_cfg)
        cache = {}
        for strategy in strategies:
            out[strategy].append(run_sequence(tasks, strategy, base, tc, lc, mc, seed=seed, cache=cache))
        if replay_k:
            out["regcl+replay"].append(
                run_sequence(tasks, "regcl", base, tc, lc, mc, replay_k=replay_k, seed=seed, cache=cache,
                             replay_tc=replay_tc)
            )
    return out
