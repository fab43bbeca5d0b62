"""Multi-branch CTR model: shared MLP fused with per-cluster MLPs.

For cluster j the effective network uses ``W_s * W_j`` (element-wise) for
every layer's weights and ``b_s + b_j`` for its biases. The cluster of an
instance comes from dynamic routing over its embedding (``adaptdhm``), from
its domain id (``star_by_domain``), or is irrelevant (``dnn``).
``shared_bottom`` has no shared MLP at all: one independent tower per domain
on top of the shared embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import ConfigError, EmptyBatchError, NonFiniteLossError, ShapeError, UnknownFieldError
from .nn_core import (
    DESK_HIDDEN,
    AdamState,
    EmbeddingTable,
    MlpParams,
    adam_apply,
    embed_accumulate_grad,
    embed_lookup,
    init_mlp,
    mlp_backward,
    mlp_forward,
    sigmoid,
    sigmoid_ce,
)
from .routing import ClusterCenters, RoutingConfig, assign, infer_route, init_centers, route_batch

KINDS = ("adaptdhm", "dnn", "shared_bottom", "star_by_domain")

# rng stream tags; shared across kinds so that equal seeds give equal
# embeddings and equal shared MLPs whatever the model kind
_EMB, _SHARED, _TOWERS, _CENTERS = 1, 2, 3, 4

# per-parameter cost of one optimizer update (Adam) and of fusing one
# branch parameter (product forward, two products + one add backward)
ADAM_FLOPS_PER_PARAM = 10
FUSION_FLOPS_PER_PARAM = 4


@dataclass
class ModelConfig:
    fields: dict[str, int]
    kind: str = "adaptdhm"
    embedding_dim: int = 8
    hidden: tuple[int, ...] = DESK_HIDDEN
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    routing_fields: list[str] | None = None
    num_domains: int | None = None
    learning_rate: float = 1e-3
    embedding_scale: float = 1.0
    freeze_branches: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.embedding_dim < 1 or self.learning_rate <= 0:
            raise ConfigError("embedding_dim and learning_rate must be positive")
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.kind in ("shared_bottom", "star_by_domain") and not self.num_domains:
            raise ConfigError(f"{self.kind} needs num_domains")
        if self.routing_fields is not None:
            unknown = [f for f in self.routing_fields if f not in self.fields]
            if unknown:
                raise UnknownFieldError(f"routing fields not in schema: {unknown}")
            if not self.routing_fields:
                raise ConfigError("routing_fields must not be empty")

    @property
    def n_groups(self) -> int:
        if self.kind == "adaptdhm":
            return self.routing.K
        if self.kind == "dnn":
            return 1
        return int(self.num_domains)


@dataclass
class TrainStepReport:
    loss: float
    cluster_histogram: list[int]
    batch_step: int
    mlp_flops: int


@dataclass
class Gradients:
    shared: list[np.ndarray] | None  # aligned with MlpParams.arrays()
    branches: dict[int, list[np.ndarray]]  # only groups present in the batch
    embeddings: dict[str, tuple[np.ndarray, np.ndarray]]  # field -> (rows, grads)


def combine_weights(shared: MlpParams, branch: MlpParams) -> MlpParams:
    """Per layer: weights multiplied element-wise, biases added."""
    if shared.shapes() != branch.shapes():
        raise ShapeError(f"shared {shared.shapes()} vs branch {branch.shapes()}")
    return MlpParams(
        [ws * wj for ws, wj in zip(shared.weights, branch.weights)],
        [bs + bj for bs, bj in zip(shared.biases, branch.biases)],
        list(shared.activations),
    )


class MultiBranchModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        seed = config.seed
        rng = np.random.default_rng([seed, _EMB])
        self.embeddings = [
            EmbeddingTable.random(name, vocab, config.embedding_dim, rng, config.embedding_scale)
            for name, vocab in config.fields.items()
        ]
        in_dim = config.embedding_dim * len(self.embeddings)
        kind = config.kind

        self.shared: MlpParams | None = None
        self.branches: list[MlpParams] = []
        if kind != "shared_bottom":
            self.shared = init_mlp(in_dim, config.hidden, np.random.default_rng([seed, _SHARED]))
        if kind in ("adaptdhm", "star_by_domain"):
            self.branches = [self.shared.ones_like() for _ in range(config.n_groups)]
        elif kind == "shared_bottom":
            rng = np.random.default_rng([seed, _TOWERS])
            self.branches = [init_mlp(in_dim, config.hidden, rng) for _ in range(config.n_groups)]

        self.centers: ClusterCenters | None = None
        if kind == "adaptdhm":
            self.centers = init_centers(config.routing, self.routing_dim,
                                        np.random.default_rng([seed, _CENTERS]))

        lr = config.learning_rate
        self.embedding_adam = [AdamState.for_params([t.vectors], lr) for t in self.embeddings]
        self.shared_adam = AdamState.for_params(self.shared.arrays(), lr) if self.shared else None
        self.branch_adam = [AdamState.for_params(b.arrays(), lr) for b in self.branches]
        self.batch_step = 0

    # ------------------------------------------------------------------
    @property
    def field_names(self) -> list[str]:
        return [t.field_name for t in self.embeddings]

    @property
    def routing_fields(self) -> list[str]:
        return list(self.config.routing_fields or self.field_names)

    @property
    def routing_dim(self) -> int:
        return self.config.embedding_dim * len(self.routing_fields)

    def _routing_columns(self) -> np.ndarray:
        d = self.config.embedding_dim
        pos = {name: i for i, name in enumerate(self.field_names)}
        return np.concatenate([np.arange(pos[f] * d, (pos[f] + 1) * d) for f in self.routing_fields])

    def _ids(self, batch: Dataset) -> dict[str, np.ndarray]:
        by_name = batch.ids_by_field()
        missing = [f for f in self.field_names if f not in by_name]
        extra = [f for f in by_name if f not in self.config.fields]
        if missing or extra:
            raise UnknownFieldError(f"dataset fields differ from model: missing {missing}, unseen {extra}")
        return by_name

    def routing_embeddings(self, x: np.ndarray) -> np.ndarray:
        # a copy: routing never feeds gradients back into the embeddings
        return np.array(x[:, self._routing_columns()], dtype=np.float64, copy=True)

    def _domain_keys(self, batch: Dataset) -> np.ndarray:
        keys = batch.domains
        m = self.config.n_groups
        if keys.size and (keys.min() < 0 or keys.max() >= m):
            raise ConfigError(f"domain ids must lie in [0, {m}); got range [{keys.min()}, {keys.max()}]")
        return keys

    def network(self, group: int) -> MlpParams:
        kind = self.config.kind
        if kind == "dnn":
            return self.shared
        if kind == "shared_bottom":
            return self.branches[group]
        return combine_weights(self.shared, self.branches[group])

    def route(self, batch: Dataset, x: np.ndarray | None = None) -> np.ndarray:
        """Group index per row, without touching any state."""
        kind = self.config.kind
        if kind == "dnn":
            return np.zeros(len(batch), dtype=np.int64)
        if kind != "adaptdhm":
            return self._domain_keys(batch)
        if x is None:
            x = embed_lookup(self.embeddings, self._ids(batch))
        return assign(infer_route(self.centers, self.routing_embeddings(x)))

    def _forward(self, x: np.ndarray, keys: np.ndarray):
        logits = np.empty(len(x))
        groups = []
        for g in np.unique(keys):
            idx = np.flatnonzero(keys == g)
            net = self.network(int(g))
            out, tape = mlp_forward(net, x[idx])
            logits[idx] = out[:, 0]
            groups.append((int(g), idx, net, tape))
        return logits, groups

    # ------------------------------------------------------------------
    def predict_logits(self, batch: Dataset) -> np.ndarray:
        if len(batch) == 0:
            return np.empty(0)
        x = embed_lookup(self.embeddings, self._ids(batch))
        logits, _ = self._forward(x, self.route(batch, x))
        return logits

    def predict(self, batch: Dataset) -> np.ndarray:
        """Click probabilities, clipped into the open interval (0, 1)."""
        p = sigmoid(self.predict_logits(batch))
        return np.clip(p, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))

    def train_step(self, batch: Dataset, loss_weight: float = 1.0) -> TrainStepReport:
        """Route, forward, backward and one Adam step per touched group.

        ``loss_weight`` scales the classification gradient; at 0 the step
        still routes (centers move) but no trainable parameter is touched.
        """
        if len(batch) == 0:
            raise EmptyBatchError("train_step needs a non-empty batch")
        cfg = self.config
        x = embed_lookup(self.embeddings, self._ids(batch))
        if cfg.kind == "adaptdhm":
            coeffs, self.centers = route_batch(self.centers, self.routing_embeddings(x), cfg.routing)
            keys = assign(coeffs)
        else:
            keys = self.route(batch, x)
        hist = np.bincount(keys, minlength=cfg.n_groups)

        loss, grads = self.loss_and_gradients(batch, keys, loss_weight, x=x)
        if not np.isfinite(loss):
            raise NonFiniteLossError(
                f"non-finite loss at batch step {self.batch_step}",
                {"batch_step": self.batch_step, "loss": loss, "histogram": hist.tolist()},
            )
        self.batch_step += 1
        p_mlp = self.shared.n_params() if self.shared else self.branches[0].n_params()
        flops = 6 * len(batch) * p_mlp
        if loss_weight != 0.0:
            flops += self.apply_gradients(grads, p_mlp, n_groups=int((hist > 0).sum()))
        return TrainStepReport(loss, hist.tolist(), self.batch_step, int(flops))

    def loss_and_gradients(self, batch: Dataset, keys: np.ndarray, loss_weight: float = 1.0,
                           x: np.ndarray | None = None) -> tuple[float, Gradients]:
        """Mean cross-entropy over the whole batch for fixed group ``keys``
        and its gradient w.r.t. every trainable array."""
        ids = self._ids(batch)
        if x is None:
            x = embed_lookup(self.embeddings, ids)
        logits, groups = self._forward(x, keys)
        loss, dlogits = sigmoid_ce(logits, batch.labels)
        dlogits = dlogits * loss_weight

        kind = self.config.kind
        dx = np.zeros_like(x)
        shared = [np.zeros_like(a) for a in self.shared.arrays()] if self.shared else None
        branches: dict[int, list[np.ndarray]] = {}
        for g, idx, net, tape in groups:
            dnet, dx[idx] = mlp_backward(net, tape, dlogits[idx][:, None])
            if kind == "dnn":
                for acc, d in zip(shared, dnet.arrays()):
                    acc += d
            elif kind == "shared_bottom":
                branches[g] = dnet.arrays()
            else:
                # d(Ws*Wj)/dWs = Wj and vice versa; biases are summed
                branch = self.branches[g]
                bg = []
                for i in range(net.n_layers):
                    shared[2 * i] += dnet.weights[i] * branch.weights[i]
                    shared[2 * i + 1] += dnet.biases[i]
                    bg.extend((dnet.weights[i] * self.shared.weights[i], dnet.biases[i]))
                branches[g] = bg
        return loss, Gradients(shared, branches, embed_accumulate_grad(self.embeddings, ids, dx))

    def apply_gradients(self, grads: Gradients, p_mlp: int, n_groups: int) -> int:
        """Adam on every group that received gradient; returns the MLP flop estimate."""
        cfg = self.config
        fused = cfg.kind in ("adaptdhm", "star_by_domain")
        flops = 0
        if grads.shared is not None:
            adam_apply(self.shared_adam, self.shared.arrays(), grads.shared)
            flops += ADAM_FLOPS_PER_PARAM * p_mlp
        if fused:
            flops += FUSION_FLOPS_PER_PARAM * p_mlp * n_groups
        if not (fused and cfg.freeze_branches):
            for g in sorted(grads.branches):
                adam_apply(self.branch_adam[g], self.branches[g].arrays(), grads.branches[g])
                flops += ADAM_FLOPS_PER_PARAM * p_mlp
        for table, state in zip(self.embeddings, self.embedding_adam):
            rows, g = grads.embeddings[table.field_name]
            adam_apply(state, [table.vectors], [g], rows=[rows])
        return flops


def count_parameters(model: MultiBranchModel) -> dict[str, int]:
    """Parameter counts per group; ``p_mlp`` is one MLP copy."""
    shared = model.shared.n_params() if model.shared else 0
    branch = sum(b.n_params() for b in model.branches)
    p_mlp = model.shared.n_params() if model.shared else model.branches[0].n_params()
    emb = sum(t.vectors.size for t in model.embeddings)
    return {
        "p_mlp": p_mlp,
        "shared_mlp": shared,
        "branch_mlp": branch,
        "mlp_total": shared + branch,
        "embedding": emb,
        "total": shared + branch + emb,
    }


def build_model(config: ModelConfig) -> MultiBranchModel:
    return MultiBranchModel(config)


def build_baseline(kind: str, config: ModelConfig) -> MultiBranchModel:
    """Same config with the model kind swapped (``dnn``, ``shared_bottom``, ``star_by_domain``)."""
    if kind not in KINDS or kind == "adaptdhm":
        raise ConfigError(f"unknown baseline kind {kind!r}")
    return MultiBranchModel(replace(config, kind=kind))


def mlp_param_count(in_dim: int, hidden: Sequence[int], out_dim: int = 1) -> int:
    sizes = [in_dim, *hidden, out_dim]
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
