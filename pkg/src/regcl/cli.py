"""Command-line entry point: ``regcl gen|init|train|merge|eval|sequence``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure,
4 consistency or topology failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace

from .datasets import FAMILIES, DomainSpec, gen_domain
from .harness import (
    BENCH_REPLAY,
    BENCH_TRAIN,
    STRATEGIES,
    SUITES,
    ModelConfig,
    base_model,
    evaluate,
    run_sequence,
    suite_specs,
)
from .io import (
    FormatError,
    load_checkpoint,
    load_dataset,
    load_grams,
    load_state,
    results_to_json,
    save_checkpoint,
    save_dataset,
    save_grams,
    save_state,
    write_json,
)
from .linalg import SingularGramError
from .merging import (
    LORA_STRATEGIES,
    MergeConfig,
    MergeState,
    TopologyError,
    mean_checkpoints,
    merge_adapters,
    merge_checkpoints,
    regcl_step,
)
from .model import ToyModel
from .training import SCHEDULES, LossConfig, TrainConfig, TrainingDiverged, train_task

log = logging.getLogger("regcl")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_CONSISTENCY = 0, 2, 3, 4


class ConsistencyError(ValueError):
    pass


@dataclass
class RunConfig:
    sequence: list
    strategy: str = "regcl"
    train: TrainConfig = BENCH_TRAIN
    loss: LossConfig = field(default_factory=LossConfig)
    merge: MergeConfig = field(default_factory=MergeConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    replay_k: int = None
    replay: TrainConfig = BENCH_REPLAY
    output_dir: str = "."
    seed: int = 0
    n_train: int = 512
    n_test: int = 128

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"--strategy must be one of {STRATEGIES}")
        if len(self.sequence) < 2:
            raise ValueError("sequence needs at least two domains")
        if self.replay_k is not None:
            if self.replay_k < 0:
                raise ValueError("--replay-k must be >= 0")
            if self.strategy != "regcl":
                raise ValueError("--replay-k only applies to --strategy regcl")
            if self.replay_k > self.n_train:
                raise ValueError("--replay-k exceeds the number of training samples per domain")
        grid = self.model.grid
        for spec in self.sequence:
            if spec.family != "toy_segmentation" or int(spec.params["grid"]) != grid:
                raise ValueError("sequence domains must be toy_segmentation with the model grid size")
        return self

    def to_dict(self):
        return {
            "sequence": [s.to_dict() for s in self.sequence],
            "strategy": self.strategy,
            "train": self.train.to_dict(),
            "loss": self.loss.to_dict(),
            "merge": self.merge.to_dict(),
            "model": self.model.to_dict(),
            "replay_k": self.replay_k,
            "replay": self.replay.to_dict(),
            "output_dir": self.output_dir,
            "seed": self.seed,
            "n_train": self.n_train,
            "n_test": self.n_test,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kw = {}
        if "sequence" in d:
            kw["sequence"] = [DomainSpec.from_dict(s) for s in d.pop("sequence")]
        for key, typ in (("train", TrainConfig), ("loss", LossConfig), ("merge", MergeConfig),
                         ("model", ModelConfig), ("replay", TrainConfig)):
            if key in d:
                kw[key] = typ(**d.pop(key))
        unknown = set(d) - {"strategy", "replay_k", "output_dir", "seed", "n_train", "n_test"}
        if unknown:
            raise ValueError(f"unknown RunConfig fields: {sorted(unknown)}")
        kw.update(d)
        kw.setdefault("sequence", [])
        return cls(**kw)


# -- argument helpers ---------------------------------------------------------


def _add_train_flags(p, defaults=BENCH_TRAIN):
    p.add_argument("--epochs", type=int, default=None, help=f"training epochs (default {defaults.epochs})")
    p.add_argument("--batch-size", type=int, default=None, help=f"mini-batch size (default {defaults.batch_size})")
    p.add_argument("--lr", type=float, default=None, help=f"initial learning rate (default {defaults.lr})")
    p.add_argument("--schedule", choices=SCHEDULES, default=None)


def _train_config(args, base, seed):
    kw = {"seed": seed}
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr"), ("schedule", "schedule")):
        value = getattr(args, flag, None)
        if value is not None:
            kw[key] = value
    return replace(base, **kw)


def _add_merge_flags(p):
    p.add_argument("--ridge-scale", type=float, default=None)
    p.add_argument("--offdiag-scale", type=float, default=None)
    p.add_argument("--lora-strategy", choices=LORA_STRATEGIES, default=None)


def _merge_config(args, base=MergeConfig()):
    kw = {}
    for flag in ("ridge_scale", "offdiag_scale", "lora_strategy"):
        value = getattr(args, flag, None)
        if value is not None:
            kw[flag] = value
    return replace(base, **kw)


def _add_model_flags(p):
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--lora-scaling", type=float, default=None)
    p.add_argument("--grid", type=int, default=None)


def _model_config(args, base=ModelConfig()):
    kw = {}
    for flag in ("hidden", "rank", "lora_scaling", "grid"):
        value = getattr(args, flag, None)
        if value is not None:
            kw[flag] = value
    return replace(base, **kw)


def _sibling(path, suffix):
    stem = path[:-5] if path.endswith(".json") else path
    return f"{stem}.{suffix}.json"


# -- commands -----------------------------------------------------------------


def cmd_gen(args):
    if args.suite:
        specs = suite_specs(args.suite, args.seed, args.grid or 16)
    else:
        if args.family is None:
            raise ValueError("gen needs --suite or --family")
        params = json.loads(args.params) if args.params else {}
        if args.grid and args.family == "toy_segmentation":
            params.setdefault("grid", args.grid)
        specs = [DomainSpec(args.family, params, args.seed, args.name or "")]
    written = []
    for spec in specs:
        train, test = gen_domain(spec, args.n_train, args.n_test)
        for ds in (train, test):
            path = os.path.join(args.out, f"{spec.name}.{ds.split}.json")
            save_dataset(path, ds)
            written.append(path)
    for path in written:
        print(path)


def cmd_init(args):
    mc = _model_config(args)
    model = base_model(args.seed, mc)
    save_checkpoint(args.out, model.to_checkpoint(seed=args.seed, model_config=mc.to_dict()))
    print(args.out)


def cmd_train(args):
    task = load_dataset(args.data)
    init = load_checkpoint(args.init)
    model = ToyModel.from_checkpoint(init)
    if task.inputs.shape[1] != model.input_dim or task.targets.shape[1] != model.output_dim:
        raise ConsistencyError("dataset dimensions do not match the init checkpoint")
    tc = _train_config(args, BENCH_TRAIN, args.seed)
    log.info("training %s on %d samples (%d epochs, lr %g)", task.task_id, len(task), tc.epochs, tc.lr)
    result = train_task(model, task, tc, LossConfig())
    meta = {k: v for k, v in init.meta.items() if k not in ("architecture", "merge_history")}
    meta.update(task_id=task.task_id, train_config=tc.to_dict())
    grams_path = args.grams or _sibling(args.out, "grams")
    history_path = args.history or _sibling(args.out, "history")
    save_checkpoint(args.out, result.model.to_checkpoint(**meta))
    save_grams(grams_path, result.grams)
    write_json(history_path, result.history)
    for path in (args.out, grams_path, history_path):
        print(path)


def cmd_merge(args):
    cfg = _merge_config(args)
    ckpts = [load_checkpoint(p) for p in args.inputs]
    if args.mode == "mean":
        save_checkpoint(args.out, mean_checkpoints(ckpts))
        print(args.out)
        return
    if not args.grams or len(args.grams) != len(ckpts):
        raise ValueError("--grams must list one gram file per --inputs checkpoint")
    grams = [load_grams(p) for p in args.grams]
    if args.mode == "regmean":
        save_checkpoint(args.out, merge_checkpoints(ckpts, grams, cfg))
        print(args.out)
        return
    # regcl: fold the inputs into an existing (or fresh) state in order.
    if args.state and os.path.exists(args.state):
        state = load_state(args.state)
    else:
        state = MergeState(config=cfg)
    for ckpt, g in zip(ckpts, grams):
        state = merge_adapters(state, ckpt, g) if ckpt.adapters else regcl_step(state, ckpt, g)
    save_state(args.out, state)
    print(args.out)
    if args.merged_out:
        save_checkpoint(args.merged_out, state.merged)
        print(args.merged_out)


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    test = load_dataset(args.data)
    if len(test) == 0:
        raise ValueError(f"--data {args.data} holds an empty test set")
    model = ToyModel.from_checkpoint(ckpt)
    if test.inputs.shape[1] != model.input_dim or test.targets.shape[1] != model.output_dim:
        raise ConsistencyError("dataset dimensions do not match the checkpoint")
    scores = evaluate(model, test)
    if args.out:
        write_json(args.out, scores)
    print(json.dumps(scores))


def _run_config(args):
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            rc = RunConfig.from_dict(json.load(fh))
    else:
        rc = RunConfig(sequence=[])
    overrides = {}
    for flag in ("strategy", "seed", "replay_k", "n_train", "n_test"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value
    if args.out is not None:
        overrides["output_dir"] = args.out
    rc = replace(rc, **overrides)
    rc = replace(
        rc,
        train=_train_config(args, rc.train, rc.train.seed),
        merge=_merge_config(args, rc.merge),
        model=_model_config(args, rc.model),
    )
    if not rc.sequence:
        rc = replace(rc, sequence=suite_specs(args.suite or "default5", rc.seed, rc.model.grid))
    return rc.validate()


def _plot(result, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(result.results)
    fig, axes = plt.subplots(1, len(names), figsize=(4.2 * len(names), 3.8))
    for ax, name in zip(axes, names):
        R = result.results[name].R
        im = ax.imshow(R, cmap="viridis", vmin=0.0, vmax=max(1.0, float(R.max())))
        ax.set_title(f"{result.strategy}: {name}")
        ax.set_xlabel("evaluated task")
        ax.set_ylabel("after training on")
        ax.set_xticks(range(len(result.task_ids)), result.task_ids, rotation=45, ha="right")
        ax.set_yticks(range(len(result.task_ids)), result.task_ids)
        for i in range(R.shape[0]):
            for j in range(R.shape[1]):
                ax.text(j, i, f"{R[i, j]:.2f}", ha="center", va="center", fontsize=7, color="w")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def cmd_sequence(args):
    rc = _run_config(args)
    tasks = [gen_domain(spec, rc.n_train, rc.n_test) for spec in rc.sequence]
    base = base_model(rc.seed, rc.model)
    log.info("running %s over %s", rc.strategy, [spec.name for spec in rc.sequence])
    result = run_sequence(
        tasks, rc.strategy, base, rc.train, rc.loss, rc.merge, replay_k=rc.replay_k, seed=rc.seed,
        replay_tc=rc.replay,
    )
    out = rc.output_dir
    os.makedirs(out, exist_ok=True)
    for i, ckpt in enumerate(result.task_checkpoints):
        save_checkpoint(os.path.join(out, f"task{i + 1}_{ckpt.meta['task_id']}.ckpt.json"), ckpt)
    for i, state in enumerate(result.states):
        save_state(os.path.join(out, f"state{i + 1}.json"), state)
    save_checkpoint(os.path.join(out, "final.ckpt.json"), result.final)
    results_path = os.path.join(out, "results.json")
    write_json(results_path, results_to_json(result, rc.seed, rc.to_dict()))
    if args.plot:
        _plot(result, os.path.join(out, "R.png"))
    m = result.metrics
    print(f"{rc.strategy} seed={rc.seed} ACC={m.acc:.4f} BWT={m.bwt:.4f} FWT={m.fwt:.4f} (mIoU)")
    print(results_path)


# -- parser -------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="regcl", description="Continual Gram-weighted model merging toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic domain datasets")
    p.add_argument("--suite", choices=SUITES)
    p.add_argument("--family", choices=FAMILIES)
    p.add_argument("--params", help="JSON object of domain parameters (with --family)")
    p.add_argument("--name")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=None)
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-test", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("init", help="write the shared initial checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("train", help="fine-tune adapters on one task and compute its Grams")
    p.add_argument("--data", required=True)
    p.add_argument("--init", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grams")
    p.add_argument("--history")
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("merge", help="merge checkpoints")
    p.add_argument("--mode", choices=("regmean", "regcl", "mean"), required=True)
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--grams", nargs="+")
    p.add_argument("--state", help="existing merge state (regcl); a fresh state is used when absent")
    p.add_argument("--merged-out", help="also write the merged checkpoint (regcl)")
    p.add_argument("--out", required=True)
    _add_merge_flags(p)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="score a checkpoint on a test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sequence", help="run a full domain-incremental sequence")
    p.add_argument("--config")
    p.add_argument("--suite", choices=SUITES)
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--seed", type=int)
    p.add_argument("--replay-k", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--plot", action="store_true")
    p.add_argument("--out")
    _add_train_flags(p)
    _add_merge_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_sequence)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed the usage error (or help) to stderr/stdout.
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (TopologyError, ConsistencyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONSISTENCY
    except (TrainingDiverged, SingularGramError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, FormatError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
