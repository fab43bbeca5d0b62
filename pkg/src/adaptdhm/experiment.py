"""Experiment orchestration behind the CLI: config files, training runs,
evaluation, center inspection and K sweeps."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import Dataset, DatasetSchema, SynthConfig, batch_iter, parse_dataset, synth_generate, write_dataset
from .errors import ConfigError, SchemaError
from .metrics import MetricReport, evaluate
from .model import KINDS, ModelConfig, MultiBranchModel, count_parameters
from .nn_core import DESK_HIDDEN
from .routing import RoutingConfig

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    kind: str = "adaptdhm"
    K: int = 3
    iterations: int = 3
    ewma_beta: float = 0.9
    init_sigma: float = 1.0
    hidden: tuple[int, ...] = DESK_HIDDEN
    embedding_dim: int = 8
    embedding_scale: float = 1.0
    routing_fields: list[str] | None = None
    batch_size: int = 1024
    learning_rate: float = 1e-3
    epochs: int = 1
    seed: int = 0
    threads: int = 1
    train_path: str | None = None
    test_path: str | None = None
    schema_path: str | None = None
    max_rows: int | None = None
    out_dir: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        for name in ("K", "iterations", "embedding_dim", "batch_size", "epochs", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        self.hidden = tuple(int(h) for h in self.hidden)

    def model_config(self, schema: DatasetSchema) -> ModelConfig:
        return ModelConfig(
            fields=dict(schema.fields),
            kind=self.kind,
            embedding_dim=self.embedding_dim,
            hidden=self.hidden,
            routing=RoutingConfig(self.K, self.iterations, self.ewma_beta, self.init_sigma, self.seed),
            routing_fields=self.routing_fields,
            num_domains=schema.num_domains,
            learning_rate=self.learning_rate,
            embedding_scale=self.embedding_scale,
            seed=self.seed,
        )

    def to_json(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


# ---------------------------------------------------------------------------
# flat "key = value" config files

def _coerce(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if raw.lower() in ("none", ""):
        return None
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(x) for x in raw.replace("-", ",").split(",") if x.strip())
    if isinstance(current, dict):
        # name:vocab,name:vocab
        out = {}
        for item in raw.split(","):
            name, _, vocab = item.partition(":")
            out[name.strip()] = int(vocab)
        return out
    return raw


_LIST_KEYS = {"routing_fields"}
_INT_OR_NONE = {"max_rows"}


def apply_overrides(cfg: ExperimentConfig, pairs: dict[str, str]) -> ExperimentConfig:
    """Apply string key/value pairs; ``synth.<name>`` keys target the generator."""
    top, synth = {}, {}
    top_fields = {f.name: f for f in fields(ExperimentConfig)}
    synth_fields = {f.name for f in fields(SynthConfig)}
    for key, raw in pairs.items():
        if key.startswith("synth."):
            name = key[len("synth."):]
            if name not in synth_fields:
                raise ConfigError(f"unknown config key {key!r}")
            synth[name] = _coerce(raw, getattr(cfg.synth, name))
        elif key in _LIST_KEYS:
            top[key] = [x.strip() for x in raw.split(",") if x.strip()] or None
        elif key in _INT_OR_NONE:
            top[key] = None if raw.strip().lower() in ("", "none") else int(raw)
        elif key in top_fields and key != "synth":
            current = getattr(cfg, key)
            top[key] = _coerce(raw, current) if current is not None else (raw.strip() or None)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        new_synth = replace(cfg.synth, **synth) if synth else cfg.synth
        return replace(cfg, synth=new_synth, **top)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def read_config_file(path: str | Path) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


# ---------------------------------------------------------------------------

def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.train_path is None:
        return synth_generate(cfg.synth)
    train_path = Path(cfg.train_path)
    schema_path = Path(cfg.schema_path) if cfg.schema_path else train_path.parent / "schema.json"
    if not schema_path.exists():
        raise FileNotFoundError(f"schema file not found: {schema_path}")
    schema = DatasetSchema.load(schema_path)
    train = parse_dataset(train_path, schema, limit=cfg.max_rows)
    if cfg.test_path is None:
        raise ConfigError("test_path is required when train_path is given")
    test = parse_dataset(cfg.test_path, schema, limit=cfg.max_rows)
    if schema.num_domains is None:
        schema.num_domains = int(max(train.domains.max(), test.domains.max())) + 1
    return train, test


def predict_logits(model: MultiBranchModel, data: Dataset, threads: int = 1) -> np.ndarray:
    """Read-only scoring; with ``threads > 1`` contiguous chunks are scored
    concurrently and concatenated in input order."""
    if threads <= 1 or len(data) < 2 * threads:
        return model.predict_logits(data)
    chunks = np.array_split(np.arange(len(data)), threads)
    with ThreadPoolExecutor(threads) as pool:
        parts = list(pool.map(lambda idx: model.predict_logits(data.subset(idx)), chunks))
    return np.concatenate(parts)


def evaluate_model(model: MultiBranchModel, data: Dataset, threads: int = 1) -> MetricReport:
    logits = predict_logits(model, data, threads)
    y = data.labels
    logloss = float(np.mean(np.logaddexp(0.0, logits) - y * logits))
    assigned = model.route(data) if data.planted is not None else None
    return evaluate(logits, y, data.sessions, data.domains, assigned, data.planted, logloss=logloss)


@dataclass
class RunReport:
    config: dict
    version: str
    parameters: dict
    epochs: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    def deterministic_view(self) -> dict:
        """The report without wall-clock fields, which vary run to run."""
        d = self.to_json()
        for e in d["epochs"]:
            e.pop("seconds", None)
            e.pop("cumulative_seconds", None)
        return d


def train_model(cfg: ExperimentConfig, train: Dataset, test: Dataset,
                model: MultiBranchModel | None = None) -> tuple[MultiBranchModel, RunReport]:
    if model is None:
        model = MultiBranchModel(cfg.model_config(train.schema))
    report = RunReport(cfg.to_json(), __version__, count_parameters(model))
    total = 0.0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses, sizes, flops = [], [], 0
        hist = np.zeros(model.config.n_groups, dtype=np.int64)
        for batch in batch_iter(train, cfg.batch_size, seed=(cfg.seed, epoch), shuffle=True):
            step = model.train_step(batch)
            losses.append(step.loss)
            sizes.append(len(batch))
            flops += step.mlp_flops
            hist += step.cluster_histogram
        seconds = time.perf_counter() - t0
        total += seconds
        metrics = evaluate_model(model, test, cfg.threads)
        train_loss = float(np.average(losses, weights=sizes))
        report.epochs.append({
            "epoch": epoch + 1,
            "train_loss": train_loss,
            "metrics": metrics.to_json(),
            "cluster_histogram": hist.tolist(),
            "mlp_flops": int(flops),
            "seconds": seconds,
            "cumulative_seconds": total,
        })
        log.info("epoch %d loss %.5f test auc %.4f (%.1fs)", epoch + 1, train_loss, metrics.auc, seconds)
    return model, report


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def generate_files(synth: SynthConfig, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = synth_generate(synth)
    paths = {"train": out / "train.csv", "test": out / "test.csv",
             "schema": out / "schema.json", "manifest": out / "manifest.json"}
    write_dataset(train, paths["train"])
    write_dataset(test, paths["test"])
    train.schema.save(paths["schema"])
    write_json({"generator": "adaptdhm.synth", "version": __version__, "synth_config": asdict(synth),
                "files": {k: v.name for k, v in paths.items() if k != "manifest"}}, paths["manifest"])
    return paths


def check_schema(model: MultiBranchModel, data: Dataset) -> None:
    if dict(model.config.fields) != dict(data.schema.fields):
        raise SchemaError(
            f"dataset schema {data.schema.fields} does not match checkpoint fields {model.config.fields}"
        )


def inspect_centers(model: MultiBranchModel) -> dict:
    if model.config.kind != "adaptdhm" or model.centers is None:
        raise ConfigError(f"checkpoint is a {model.config.kind!r} model; only adaptdhm has centers")
    c = model.centers.centers
    return {
        "K": int(c.shape[0]),
        "dim": int(c.shape[1]),
        "batch_step": model.centers.batch_step,
        "routing_fields": model.routing_fields,
        "centers": c.tolist(),
        "cosine": (c @ c.T).tolist(),
    }


def sweep_k(cfg: ExperimentConfig, k_list: list[int], train: Dataset, test: Dataset) -> list[dict]:
    if not k_list:
        raise ConfigError("k_list must not be empty")
    rows = []
    for k in k_list:
        kcfg = replace(cfg, K=int(k), kind="adaptdhm")
        t0 = time.perf_counter()
        _, report = train_model(kcfg, train, test)
        last = report.epochs[-1]["metrics"]
        rows.append({"K": int(k), "auc": last["auc"], "gauc": last["gauc"],
                     "seconds": time.perf_counter() - t0})
    return rows
