"""Small fixtures shared by the model and acceptance tests."""

import numpy as np

from adaptdhm.data import Dataset, DatasetSchema
from adaptdhm.model import ModelConfig, MultiBranchModel

FIELDS = {"u": 12, "v": 9, "w": 7}


def toy_dataset(n, seed=0, fields=FIELDS, num_domains=3):
    rng = np.random.default_rng(seed)
    schema = DatasetSchema(dict(fields), hash_features=False, num_domains=num_domains)
    feats = np.stack([rng.integers(v, size=n) for v in fields.values()], axis=1)
    return Dataset(schema, rng.integers(0, 2, size=n).astype(float),
                   rng.integers(num_domains, size=n), rng.integers(0, 5, size=n), feats)


def perturb_branches(model, seed=0, scale=0.3):
    """Move branches away from the ones/zeros identity so products are non-trivial."""
    rng = np.random.default_rng(seed)
    for b in model.branches:
        for a in b.arrays():
            a += scale * rng.normal(size=a.shape)


def jitter_biases(model, seed=0, scale=0.1):
    """Zero-initialised biases put rows whose inputs are all zero exactly on a
    ReLU kink, where finite differences are one-sided; move them off it."""
    rng = np.random.default_rng(seed)
    nets = ([model.shared] if model.shared is not None else []) + list(model.branches)
    for net in nets:
        for b in net.biases:
            b += scale * rng.normal(size=b.shape)


def fd_relative_errors(model, batch, keys, n_coords, seed=0, eps=1e-6, floor=1e-7):
    """Central differences of the batch loss at fixed group keys.

    Samples ``n_coords`` coordinates spread over shared weights and biases,
    branch weights and biases, and embedding rows used by the batch.
    Returns a list of (group_name, relative_error).
    """
    rng = np.random.default_rng(seed)
    _, grads = model.loss_and_gradients(batch, keys)
    slots = []  # (name, array, analytic gradient array)
    if model.shared is not None:
        for i, (p, g) in enumerate(zip(model.shared.arrays(), grads.shared)):
            slots.append((f"shared/{'W' if i % 2 == 0 else 'b'}{i // 2}", p, g))
    for gidx, gl in grads.branches.items():
        for i, (p, g) in enumerate(zip(model.branches[gidx].arrays(), gl)):
            slots.append((f"branch{gidx}/{'W' if i % 2 == 0 else 'b'}{i // 2}", p, g))
    for t in model.embeddings:
        rows, g = grads.embeddings[t.field_name]
        full = np.zeros_like(t.vectors)
        full[rows] = g
        slots.append((f"emb/{t.field_name}", t.vectors, full))

    out = []
    per_slot = max(1, -(-n_coords // len(slots)))
    for name, p, g in slots:
        flat_p, flat_g = p.reshape(-1), g.reshape(-1)
        candidates = np.flatnonzero(np.abs(flat_g) > floor)
        if candidates.size == 0:
            continue
        for c in rng.choice(candidates, size=min(per_slot, candidates.size), replace=False):
            orig = flat_p[c]
            flat_p[c] = orig + eps
            lp, _ = model.loss_and_gradients(batch, keys)
            flat_p[c] = orig - eps
            lm, _ = model.loss_and_gradients(batch, keys)
            flat_p[c] = orig
            num = (lp - lm) / (2 * eps)
            out.append((name, abs(num - flat_g[c]) / max(abs(num), abs(flat_g[c]))))
    return out


def snapshot(model):
    arrays = [t.vectors for t in model.embeddings]
    if model.shared is not None:
        arrays += model.shared.arrays()
    for b in model.branches:
        arrays += b.arrays()
    return [a.copy() for a in arrays]


def small_config(kind="adaptdhm", K=3, seed=0, **kw):
    from adaptdhm.routing import RoutingConfig
    kw.setdefault("hidden", (6, 4))
    kw.setdefault("embedding_dim", 3)
    return ModelConfig(dict(FIELDS), kind=kind, routing=RoutingConfig(K=K, seed=seed),
                       num_domains=3, seed=seed, **kw)


def build(kind="adaptdhm", K=3, seed=0, **kw):
    return MultiBranchModel(small_config(kind, K, seed, **kw))
