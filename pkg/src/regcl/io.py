"""JSON file formats for Grams, checkpoints, merge states, datasets and results.

Every document carries ``format_version``. Floats are written with Python's
shortest round-trip ``repr``, so ``read(write(x))`` reproduces every 64-bit
value exactly, and output bytes depend only on the input values.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .datasets import DomainSpec, TaskDataset
from .linalg import GramMatrix
from .merging import MergeConfig, MergeState
from .model import Checkpoint, LayerParams, LoraAdapter

FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def _floats(arr):
    return [float(x) for x in np.asarray(arr, dtype=np.float64).ravel()]


def matrix_to_json(M):
    M = np.asarray(M, dtype=np.float64)
    return {"shape": list(M.shape), "data": _floats(M)}


def matrix_from_json(d):
    shape = tuple(int(s) for s in d["shape"])
    data = np.asarray(d["data"], dtype=np.float64)
    if data.size != int(np.prod(shape)):
        raise FormatError(f"matrix data has {data.size} values, shape {shape} needs {int(np.prod(shape))}")
    return data.reshape(shape)


def _check_version(doc, what):
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{what}: unsupported or missing format_version")


def grams_to_json(grams):
    return {
        "format_version": FORMAT_VERSION,
        "layers": {
            name: {"dim": g.dim, "sample_count": int(g.sample_count), "values": _floats(g.values)}
            for name, g in grams.items()
        },
    }


def grams_from_json(doc):
    _check_version(doc, "gram file")
    out = {}
    for name, entry in doc["layers"].items():
        m = int(entry["dim"])
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != m * m:
            raise FormatError(f"gram {name!r}: expected {m * m} values, got {values.size}")
        out[name] = GramMatrix(values.reshape(m, m), int(entry["sample_count"]))
    return out


def checkpoint_to_json(ckpt):
    return {
        "format_version": FORMAT_VERSION,
        "meta": ckpt.meta,
        "layers": [
            {
                "name": layer.name,
                "kind": layer.kind,
                "frozen": layer.frozen,
                "shape": list(layer.weight.shape),
                "data": _floats(layer.weight),
                "aux": [matrix_to_json(a) for a in layer.aux],
            }
            for layer in ckpt.layers
        ],
        "adapters": [
            {
                "layer_name": a.layer_name,
                "rank": a.rank,
                "scaling": a.scaling,
                "a": matrix_to_json(a.a),
                "b": matrix_to_json(a.b),
            }
            for a in ckpt.adapters
        ],
    }


def checkpoint_from_json(doc):
    _check_version(doc, "checkpoint file")
    layers = []
    for entry in doc["layers"]:
        weight = matrix_from_json({"shape": entry["shape"], "data": entry["data"]})
        aux = tuple(matrix_from_json(a) for a in entry.get("aux", []))
        layers.append(LayerParams(entry["name"], entry["kind"], weight, aux, bool(entry.get("frozen", False))))
    adapters = []
    for entry in doc.get("adapters", []):
        adapter = LoraAdapter(
            entry["layer_name"], matrix_from_json(entry["a"]), matrix_from_json(entry["b"]), entry["scaling"]
        )
        if adapter.rank != int(entry["rank"]):
            raise FormatError(f"adapter {adapter.layer_name!r}: rank field disagrees with factor shapes")
        adapters.append(adapter)
    return Checkpoint(tuple(layers), tuple(adapters), doc.get("meta", {}))


def state_to_json(state):
    return {
        "format_version": FORMAT_VERSION,
        "task_count": state.task_count,
        "merge_history": state.merge_history,
        "accumulators": grams_to_json(state.accumulators),
        "merged": None if state.merged is None else checkpoint_to_json(state.merged),
        "config": state.config.to_dict(),
    }


def state_from_json(doc):
    _check_version(doc, "merge state file")
    merged = None if doc.get("merged") is None else checkpoint_from_json(doc["merged"])
    state = MergeState(
        grams_from_json(doc["accumulators"]),
        merged,
        int(doc["task_count"]),
        MergeConfig(**doc.get("config", {})),
    )
    if state.merge_history != list(doc.get("merge_history", [])):
        raise FormatError("merge_history does not match the merged checkpoint")
    return state


def dataset_to_json(ds):
    return {
        "format_version": FORMAT_VERSION,
        "task_id": ds.task_id,
        "split": ds.split,
        "domain_spec": None if ds.domain_spec is None else ds.domain_spec.to_dict(),
        "inputs": matrix_to_json(ds.inputs),
        "targets": matrix_to_json(ds.targets),
    }


def dataset_from_json(doc):
    _check_version(doc, "dataset file")
    spec = None if doc.get("domain_spec") is None else DomainSpec.from_dict(doc["domain_spec"])
    return TaskDataset(
        doc["task_id"], matrix_from_json(doc["inputs"]), matrix_from_json(doc["targets"]), doc["split"], spec
    )


def results_to_json(result, seed, config_echo):
    return {
        "strategy": result.strategy,
        "seed": seed,
        "task_ids": list(result.task_ids),
        "R": {name: rm.R.tolist() for name, rm in result.results.items()},
        "metrics": result.metrics.per_metric,
        "independent_diagonal": result.diagonal,
        "config_echo": config_echo,
    }


def dumps(doc):
    return json.dumps(doc, separators=(",", ":"), allow_nan=False) + "\n"


def write_json(path, doc):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(doc))


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def save_checkpoint(path, ckpt):
    write_json(path, checkpoint_to_json(ckpt))


def load_checkpoint(path):
    return checkpoint_from_json(read_json(path))


def save_grams(path, grams):
    write_json(path, grams_to_json(grams))


def load_grams(path):
    return grams_from_json(read_json(path))


def save_state(path, state):
    write_json(path, state_to_json(state))


def load_state(path):
    return state_from_json(read_json(path))


def save_dataset(path, ds):
    write_json(path, dataset_to_json(ds))


def load_dataset(path):
    return dataset_from_json(read_json(path))
