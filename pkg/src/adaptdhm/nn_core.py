"""Small dense network engine: ReLU MLPs, manual backprop, Adam, embeddings.

Everything is float64 numpy. Weights are stored ``(in_features, out_features)``
so a layer computes ``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import LabelError, ShapeError, TapeError, UnknownFieldError

RELU = "relu"
NONE = "none"
ACTIVATIONS = (RELU, NONE)

DEFAULT_HIDDEN = (512, 256, 128, 64, 32)
DESK_HIDDEN = (64, 32, 16)


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations differ in length")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"weight {w.shape} / bias {b.shape} inconsistent", layer=i)
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"input width {w.shape[0]} != previous output width "
                    f"{self.weights[i - 1].shape[1]}",
                    layer=i,
                )

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )

    def ones_like(self) -> "MlpParams":
        """Same shapes, weights all one and biases all zero."""
        return MlpParams(
            [np.ones_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            list(self.activations),
        )


def init_mlp(in_dim: int, hidden: Sequence[int], rng: np.random.Generator, out_dim: int = 1) -> MlpParams:
    """ReLU MLP with a linear head.

    Hidden layers are He-uniform, the head is Glorot-uniform, biases zero.
    """
    sizes = [in_dim, *hidden, out_dim]
    if any(s < 1 for s in sizes):
        raise ValueError(f"layer sizes must be positive, got {sizes}")
    weights, biases, acts = [], [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        limit = np.sqrt(6.0 / (fan_in + fan_out)) if last else np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
        acts.append(NONE if last else RELU)
    return MlpParams(weights, biases, acts)


@dataclass
class MlpTape:
    """What ``mlp_forward`` keeps for the backward pass."""

    params_id: int
    shapes: list[tuple[int, int]]
    inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, MlpTape]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"input must be 2-D, got shape {x.shape}", layer=0)
    inputs, pres = [], []
    h = x
    for i, (w, b, act) in enumerate(zip(params.weights, params.biases, params.activations)):
        if h.shape[1] != w.shape[0]:
            raise ShapeError(f"input width {h.shape[1]} != weight rows {w.shape[0]}", layer=i)
        inputs.append(h)
        z = h @ w + b
        pres.append(z)
        h = np.maximum(z, 0.0) if act == RELU else z
    return h, MlpTape(id(params), params.shapes(), inputs, pres)


def mlp_backward(
    params: MlpParams, tape: MlpTape, output_grad: np.ndarray
) -> tuple[MlpParams, np.ndarray]:
    """Return (gradients packed as MlpParams, gradient w.r.t. the input)."""
    if tape.params_id != id(params) or tape.shapes != params.shapes():
        raise TapeError("tape was produced by a different parameter set")
    g = np.asarray(output_grad, dtype=np.float64)
    expected = tape.pre_activations[-1].shape
    if g.shape != expected:
        raise ShapeError(f"output_grad shape {g.shape} != output shape {expected}",
                         layer=params.n_layers - 1)
    n = params.n_layers
    dws: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for i in range(n - 1, -1, -1):
        if params.activations[i] == RELU:
            g = g * (tape.pre_activations[i] > 0.0)
        dws[i] = tape.inputs[i].T @ g
        dbs[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return MlpParams(dws, dbs, list(params.activations)), g


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], learning_rate: float = 1e-3, **kw) -> "AdamState":
        return cls(
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
            learning_rate=learning_rate,
            **kw,
        )


def adam_apply(
    state: AdamState,
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    rows: Sequence[np.ndarray | None] | None = None,
) -> None:
    """One Adam step with bias correction, in place on ``params`` and ``state``.

    ``rows`` optionally restricts the update of each array to the given row
    indices (lazy/sparse Adam for embedding tables); the grads for such an
    array are then indexed by those rows, i.e. shape ``(len(rows), dim)``.
    """
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ShapeError(
            f"{len(params)} params, {len(grads)} grads, {len(state.first_moment)} moment slots"
        )
    if rows is None:
        rows = [None] * len(params)
    for i, (p, g, r, m) in enumerate(zip(params, grads, rows, state.first_moment)):
        want = p.shape if r is None else (len(r), *p.shape[1:])
        if g.shape != want or m.shape != p.shape:
            raise ShapeError(f"param {i}: grad shape {g.shape} != expected {want}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    step_size = state.learning_rate / (1.0 - b1**t)
    bc2 = 1.0 - b2**t
    for p, g, r, m, v in zip(params, grads, rows, state.first_moment, state.second_moment):
        if r is None:
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= step_size * m / (np.sqrt(v / bc2) + state.epsilon)
        else:
            mr = b1 * m[r] + (1.0 - b1) * g
            vr = b2 * v[r] + (1.0 - b2) * (g * g)
            m[r] = mr
            v[r] = vr
            p[r] -= step_size * mr / (np.sqrt(vr / bc2) + state.epsilon)


def sigmoid(z):
    return expit(z)


def sigmoid_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy on logits and its gradient w.r.t. the logits.

    Uses ``softplus(z) - y*z`` so large |z| never produce log(0).
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape:
        raise ShapeError(f"logits {z.shape} vs labels {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise LabelError("labels must be 0 or 1")
    n = z.size
    loss = float(np.sum(np.logaddexp(0.0, z) - y * z) / n)
    return loss, (expit(z) - y) / n


@dataclass
class EmbeddingTable:
    field_name: str
    vocab_size: int
    dim: int
    vectors: np.ndarray = field(repr=False)

    @classmethod
    def random(cls, field_name: str, vocab_size: int, dim: int, rng: np.random.Generator,
               scale: float = 1.0) -> "EmbeddingTable":
        return cls(field_name, vocab_size, dim, rng.normal(0.0, scale, size=(vocab_size, dim)))


def _ids_for(tables: Sequence[EmbeddingTable], ids: Mapping[str, np.ndarray]):
    known = {t.field_name for t in tables}
    extra = [k for k in ids if k not in known]
    if extra:
        raise UnknownFieldError(f"unknown field(s): {extra}")
    out = []
    for t in tables:
        if t.field_name not in ids:
            raise UnknownFieldError(f"missing ids for field {t.field_name!r}")
        out.append(np.asarray(ids[t.field_name], dtype=np.int64))
    return out


def embed_lookup(tables: Sequence[EmbeddingTable], ids: Mapping[str, np.ndarray]) -> np.ndarray:
    """Concatenate per-field vectors in table order -> (n, sum of dims)."""
    cols = _ids_for(tables, ids)
    return np.concatenate([t.vectors[c] for t, c in zip(tables, cols)], axis=1)


def embed_accumulate_grad(
    tables: Sequence[EmbeddingTable], ids: Mapping[str, np.ndarray], row_grad: np.ndarray
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Split a concatenated-row gradient back onto table rows.

    Returns ``{field: (unique_ids, summed_grads)}``; a repeated id gets the
    sum of the gradients of every row it appeared in.
    """
    cols = _ids_for(tables, ids)
    width = sum(t.dim for t in tables)
    if row_grad.shape != (len(cols[0]) if cols else 0, width):
        raise ShapeError(f"row_grad shape {row_grad.shape} incompatible with width {width}")
    out = {}
    offset = 0
    for t, c in zip(tables, cols):
        uniq, inv = np.unique(c, return_inverse=True)
        g = np.zeros((len(uniq), t.dim))
        np.add.at(g, inv, row_grad[:, offset:offset + t.dim])
        out[t.field_name] = (uniq, g)
        offset += t.dim
    return out
