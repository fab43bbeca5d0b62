"""Dataset schema, CSV ingestion with feature hashing, batching, and a
synthetic multi-domain generator with planted latent clusters.

CSV layout (UTF-8, header required)::

    label,domain_id,session_id,<field1>,<field2>,...[,planted_cluster]

Feature values are hashed into ``[0, vocab)`` with
``blake2b(f"{field}\\x1f{value}", digest_size=8)`` read as a little-endian
unsigned 64-bit integer, modulo the field's vocab size. Schemas written by the
generator set ``hash_features = False`` because their values are already
in-range integer ids.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, LabelError, SchemaError

PLANTED_COLUMN = "planted_cluster"


def stable_hash64(field_name: str, value: str) -> int:
    data = f"{field_name}\x1f{value}".encode("utf-8")
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def hash_feature(field_name: str, value: str, vocab_size: int) -> int:
    return stable_hash64(field_name, value) % vocab_size


@dataclass
class DatasetSchema:
    fields: dict[str, int]  # name -> vocab size, in column order
    label_column: str = "label"
    domain_column: str = "domain_id"
    session_column: str = "session_id"
    hash_features: bool = True
    num_domains: int | None = None

    def __post_init__(self):
        if not self.fields:
            raise SchemaError("schema declares no feature fields")
        reserved = {self.label_column, self.domain_column, self.session_column, PLANTED_COLUMN}
        for name, vocab in self.fields.items():
            if name in reserved:
                raise SchemaError(f"field name {name!r} collides with a reserved column")
            if int(vocab) < 2:
                raise SchemaError(f"field {name!r}: vocab size must be >= 2, got {vocab}")

    @property
    def field_names(self) -> list[str]:
        return list(self.fields)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "DatasetSchema":
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetSchema":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class Instance:
    label: int
    domain_id: int
    session_id: str
    features: dict[str, int]
    planted_cluster: int | None = None


@dataclass
class Dataset:
    """Columnar storage; row i is one impression."""

    schema: DatasetSchema
    labels: np.ndarray  # (n,) float64 in {0, 1}
    domains: np.ndarray  # (n,) int64
    sessions: np.ndarray  # (n,) int64 session group ids
    features: np.ndarray  # (n, n_fields) int64
    planted: np.ndarray | None = None  # (n,) int64

    def __len__(self) -> int:
        return len(self.labels)

    def ids_by_field(self) -> dict[str, np.ndarray]:
        return {name: self.features[:, i] for i, name in enumerate(self.schema.field_names)}

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(
            self.schema,
            self.labels[idx],
            self.domains[idx],
            self.sessions[idx],
            self.features[idx],
            None if self.planted is None else self.planted[idx],
        )

    def __iter__(self) -> Iterator[Instance]:
        names = self.schema.field_names
        for i in range(len(self)):
            yield Instance(
                int(self.labels[i]),
                int(self.domains[i]),
                str(self.sessions[i]),
                dict(zip(names, self.features[i].tolist())),
                None if self.planted is None else int(self.planted[i]),
            )


def _session_key(value: str) -> int:
    try:
        return int(value)
    except ValueError:
        # signed so it fits int64; only used for grouping
        return stable_hash64("__session__", value) - (1 << 63)


def parse_dataset(path: str | Path, schema: DatasetSchema, limit: int | None = None) -> Dataset:
    """Read a CSV into a ``Dataset``.

    ``limit`` keeps only the first ``limit`` data rows (subsampling large
    public files for desk-scale runs).
    """
    names = schema.field_names
    labels, domains, sessions, feats, planted = [], [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file", line=1) from None
        required = [schema.label_column, schema.domain_column, schema.session_column, *names]
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"header lacks columns {missing}", line=1)
        pos = {c: header.index(c) for c in header}
        has_planted = PLANTED_COLUMN in pos
        for lineno, row in enumerate(reader, start=2):
            if limit is not None and len(labels) >= limit:
                break
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"expected {len(header)} columns, got {len(row)}", line=lineno)
            lab = row[pos[schema.label_column]].strip()
            if lab not in ("0", "1"):
                raise LabelError(f"line {lineno}: label must be 0 or 1, got {lab!r}")
            try:
                dom = int(row[pos[schema.domain_column]])
            except ValueError:
                raise SchemaError(f"non-integer domain id {row[pos[schema.domain_column]]!r}",
                                  line=lineno) from None
            ids = []
            for name in names:
                raw = row[pos[name]].strip()
                vocab = schema.fields[name]
                if schema.hash_features:
                    ids.append(hash_feature(name, raw, vocab))
                else:
                    try:
                        v = int(raw)
                    except ValueError:
                        raise SchemaError(f"field {name!r}: non-integer id {raw!r}", line=lineno) from None
                    if not 0 <= v < vocab:
                        raise SchemaError(f"field {name!r}: id {v} outside [0, {vocab})", line=lineno)
                    ids.append(v)
            labels.append(float(lab))
            domains.append(dom)
            sessions.append(_session_key(row[pos[schema.session_column]].strip()))
            feats.append(ids)
            if has_planted:
                planted.append(int(row[pos[PLANTED_COLUMN]]))
    return Dataset(
        schema,
        np.asarray(labels, dtype=np.float64),
        np.asarray(domains, dtype=np.int64),
        np.asarray(sessions, dtype=np.int64),
        np.asarray(feats, dtype=np.int64).reshape(len(labels), len(names)),
        np.asarray(planted, dtype=np.int64) if has_planted else None,
    )


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    schema = dataset.schema
    header = [schema.label_column, schema.domain_column, schema.session_column, *schema.field_names]
    if dataset.planted is not None:
        header.append(PLANTED_COLUMN)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(dataset)):
            row = [int(dataset.labels[i]), int(dataset.domains[i]), int(dataset.sessions[i]),
                   *dataset.features[i].tolist()]
            if dataset.planted is not None:
                row.append(int(dataset.planted[i]))
            w.writerow(row)


def batch_iter(dataset: Dataset, batch_size: int, seed: int | tuple[int, ...] = 0, shuffle: bool = True) -> Iterator[Dataset]:
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield dataset.subset(order[start:start + batch_size])


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    """Knobs of the planted-cluster generator.

    Users belong to one latent cluster. A user's profile ids come from vector
    quantization of a latent point drawn around the cluster's center, so
    ``separation`` (distance of the centers from the origin, in units of the
    per-user latent noise) controls how cluster-specific those ids are.
    Item ids are cluster-independent; the click logit is a cluster-specific
    linear function of per-item scores, so clusters disagree on rankings.
    """

    K_true: int = 3
    M: int = 6
    n_train: int = 100_000
    n_test: int = 20_000
    user_fields: dict[str, int] = field(
        default_factory=lambda: {f"user_{c}": 32 for c in "abcdef"}
    )
    item_fields: dict[str, int] = field(
        default_factory=lambda: {"item_a": 100, "item_b": 100, "item_c": 100}
    )
    separation: float = 8.0
    label_noise: float = 0.0
    label_scale: float = 2.0
    impressions_per_user: int = 20
    latent_dim: int = 8
    domain_concentration: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.K_true < 1 or self.M < 1:
            raise ConfigError("K_true and M must be >= 1")
        if self.n_train < 1 or self.n_test < 0:
            raise ConfigError("n_train must be >= 1 and n_test >= 0")
        if self.separation <= 0:
            raise ConfigError("separation must be positive")
        if not 0.0 <= self.label_noise < 0.5:
            raise ConfigError("label_noise must be in [0, 0.5)")
        if self.latent_dim < self.K_true:
            raise ConfigError("latent_dim must be >= K_true")
        if not self.user_fields or not self.item_fields:
            raise ConfigError("need at least one user field and one item field")
        if set(self.user_fields) & set(self.item_fields):
            raise ConfigError("user and item field names overlap")
        if self.impressions_per_user < 1:
            raise ConfigError("impressions_per_user must be >= 1")

    def schema(self) -> DatasetSchema:
        return DatasetSchema({**self.user_fields, **self.item_fields}, hash_features=False,
                             num_domains=self.M)


@dataclass
class SynthWorld:
    """Ground-truth generator parameters derived from a ``SynthConfig``."""

    centers: np.ndarray  # (K_true, latent_dim)
    codebooks: dict[str, np.ndarray]  # user field -> (vocab, latent_dim)
    item_scores: dict[str, np.ndarray]  # item field -> (vocab,)
    label_weights: np.ndarray  # (K_true, n_item_fields)
    label_bias: np.ndarray  # (K_true,)
    domain_given_cluster: np.ndarray  # (K_true, M), rows sum to 1


def build_world(config: SynthConfig) -> SynthWorld:
    rng = np.random.default_rng([config.seed, 0])
    q, _ = np.linalg.qr(rng.normal(size=(config.latent_dim, config.K_true)))
    centers = config.separation * q.T
    codebooks = {f: rng.normal(size=(v, config.latent_dim)) for f, v in config.user_fields.items()}
    item_scores = {f: rng.normal(size=v) for f, v in config.item_fields.items()}
    w = rng.normal(size=(config.K_true, len(config.item_fields)))
    w = config.label_scale * w / np.linalg.norm(w, axis=1, keepdims=True)
    # base CTRs spread over [0.1, 0.4]
    base = np.linspace(0.1, 0.4, config.K_true) if config.K_true > 1 else np.array([0.25])
    bias = np.log(base / (1.0 - base))
    mix = rng.dirichlet(np.full(config.M, config.domain_concentration), size=config.K_true)
    return SynthWorld(centers, codebooks, item_scores, w, bias, mix)


def user_codes(world: SynthWorld, latent: np.ndarray) -> dict[str, np.ndarray]:
    """Nearest-codeword id per user field for each latent point."""
    out = {}
    for f, cb in world.codebooks.items():
        d2 = (latent**2).sum(1)[:, None] - 2.0 * latent @ cb.T + (cb**2).sum(1)[None, :]
        out[f] = np.argmin(d2, axis=1)
    return out


def generator_embeddings(world: SynthWorld, dataset: Dataset) -> np.ndarray:
    """Generator-side view of each row: concatenated codewords of its user ids."""
    names = dataset.schema.field_names
    parts = [world.codebooks[f][dataset.features[:, names.index(f)]] for f in world.codebooks]
    return np.concatenate(parts, axis=1)


def click_logits(world: SynthWorld, clusters: np.ndarray, items: dict[str, np.ndarray]) -> np.ndarray:
    a = np.stack([world.item_scores[f][items[f]] for f in world.item_scores], axis=1)
    return world.label_bias[clusters] + np.einsum("nf,nf->n", world.label_weights[clusters], a)


def synth_generate(config: SynthConfig) -> tuple[Dataset, Dataset]:
    world = build_world(config)
    rng = np.random.default_rng([config.seed, 1])
    n = config.n_train + config.n_test
    n_users = max(1, -(-n // config.impressions_per_user))

    user_cluster = rng.integers(config.K_true, size=n_users)
    latent = world.centers[user_cluster] + rng.normal(size=(n_users, config.latent_dim))
    codes = user_codes(world, latent)

    user = rng.integers(n_users, size=n)
    cluster = user_cluster[user]
    items = {f: rng.integers(v, size=n) for f, v in config.item_fields.items()}
    p = 1.0 / (1.0 + np.exp(-click_logits(world, cluster, items)))
    labels = (rng.random(n) < p).astype(np.float64)
    flip = rng.random(n) < config.label_noise
    labels[flip] = 1.0 - labels[flip]
    cdf = np.cumsum(world.domain_given_cluster[cluster], axis=1)
    domains = np.minimum((rng.random(n)[:, None] > cdf).sum(axis=1), config.M - 1)

    feats = np.stack([codes[f][user] for f in config.user_fields] + [items[f] for f in config.item_fields],
                     axis=1).astype(np.int64)
    full = Dataset(config.schema(), labels, domains.astype(np.int64), user.astype(np.int64), feats,
                   cluster.astype(np.int64))
    idx = np.arange(n)
    return full.subset(idx[:config.n_train]), full.subset(idx[config.n_train:])

