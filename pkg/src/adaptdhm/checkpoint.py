"""Versioned model checkpoints.

A checkpoint is an uncompressed ``.npz`` archive. Every array is stored as
little-endian float64 (``<f8``); the entry ``meta`` holds a JSON string with
the format name/version, the model config, batch step and Adam step counters.
Array entries:

    emb/<field>, emb_m/<field>, emb_v/<field>
    shared/<i>, shared_m/<i>, shared_v/<i>          i indexes W0, b0, W1, b1, ...
    branch/<g>/<i>, branch_m/<g>/<i>, branch_v/<g>/<i>
    centers                                          (K, dim), adaptdhm only
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, MultiBranchModel
from .nn_core import AdamState
from .routing import ClusterCenters, RoutingConfig

FORMAT = "adaptdhm-checkpoint"
VERSION = 1
LE_F8 = np.dtype("<f8")


def config_to_json(config: ModelConfig) -> dict:
    d = asdict(config)
    d["hidden"] = list(config.hidden)
    return d


def config_from_json(d: dict) -> ModelConfig:
    d = dict(d)
    d["routing"] = RoutingConfig(**d["routing"])
    d["hidden"] = tuple(d["hidden"])
    return ModelConfig(**d)


def _adam_meta(state: AdamState) -> dict:
    return {"step_count": state.step_count, "learning_rate": state.learning_rate,
            "beta1": state.beta1, "beta2": state.beta2, "epsilon": state.epsilon}


def save_checkpoint(model: MultiBranchModel, path: str | Path) -> None:
    arrays: dict[str, np.ndarray] = {}

    def put(key, a):
        arrays[key] = np.ascontiguousarray(a, dtype=LE_F8)

    for t, st in zip(model.embeddings, model.embedding_adam):
        put(f"emb/{t.field_name}", t.vectors)
        put(f"emb_m/{t.field_name}", st.first_moment[0])
        put(f"emb_v/{t.field_name}", st.second_moment[0])
    if model.shared is not None:
        for i, (p, m, v) in enumerate(zip(model.shared.arrays(), model.shared_adam.first_moment,
                                          model.shared_adam.second_moment)):
            put(f"shared/{i}", p)
            put(f"shared_m/{i}", m)
            put(f"shared_v/{i}", v)
    for g, (b, st) in enumerate(zip(model.branches, model.branch_adam)):
        for i, (p, m, v) in enumerate(zip(b.arrays(), st.first_moment, st.second_moment)):
            put(f"branch/{g}/{i}", p)
            put(f"branch_m/{g}/{i}", m)
            put(f"branch_v/{g}/{i}", v)
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "config": config_to_json(model.config),
        "batch_step": model.batch_step,
        "adam": {
            "embedding": [_adam_meta(s) for s in model.embedding_adam],
            "shared": _adam_meta(model.shared_adam) if model.shared_adam else None,
            "branches": [_adam_meta(s) for s in model.branch_adam],
        },
    }
    if model.centers is not None:
        put("centers", model.centers.centers)
        meta["centers_batch_step"] = model.centers.batch_step
    # key order matters: field order defines the embedding layout
    arrays["meta"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _restore_adam(state: AdamState, meta: dict, moments_m, moments_v) -> None:
    for dst, src in zip(state.first_moment, moments_m):
        dst[...] = src
    for dst, src in zip(state.second_moment, moments_v):
        dst[...] = src
    state.step_count = int(meta["step_count"])
    state.learning_rate = meta["learning_rate"]
    state.beta1, state.beta2, state.epsilon = meta["beta1"], meta["beta2"], meta["epsilon"]


def load_checkpoint(path: str | Path) -> MultiBranchModel:
    try:
        npz = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with npz:
        if "meta" not in npz.files:
            raise CheckpointError("not an adaptdhm checkpoint (no meta entry)")
        meta = json.loads(str(npz["meta"]))
        if meta.get("format") != FORMAT:
            raise CheckpointError(f"unexpected checkpoint format {meta.get('format')!r}")
        if meta.get("version") != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
        model = MultiBranchModel(config_from_json(meta["config"]))
        try:
            for t, st, am in zip(model.embeddings, model.embedding_adam, meta["adam"]["embedding"]):
                t.vectors[...] = npz[f"emb/{t.field_name}"]
                _restore_adam(st, am, [npz[f"emb_m/{t.field_name}"]], [npz[f"emb_v/{t.field_name}"]])
            if model.shared is not None:
                n = len(model.shared.arrays())
                for i, p in enumerate(model.shared.arrays()):
                    p[...] = npz[f"shared/{i}"]
                _restore_adam(model.shared_adam, meta["adam"]["shared"],
                              [npz[f"shared_m/{i}"] for i in range(n)],
                              [npz[f"shared_v/{i}"] for i in range(n)])
            for g, (b, st) in enumerate(zip(model.branches, model.branch_adam)):
                n = len(b.arrays())
                for i, p in enumerate(b.arrays()):
                    p[...] = npz[f"branch/{g}/{i}"]
                _restore_adam(st, meta["adam"]["branches"][g],
                              [npz[f"branch_m/{g}/{i}"] for i in range(n)],
                              [npz[f"branch_v/{g}/{i}"] for i in range(n)])
            if model.centers is not None:
                model.centers = ClusterCenters(np.array(npz["centers"], dtype=np.float64),
                                               int(meta["centers_batch_step"]))
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"checkpoint arrays inconsistent with its config: {exc}") from exc
        model.batch_step = int(meta["batch_step"])
    return model
