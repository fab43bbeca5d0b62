"""Dynamic-routing soft clustering of instance embeddings.

Per batch: inherit the persistent unit-norm centers, run a few rounds of
(dot-product scores -> softmax coefficients -> weighted-sum recentering), then
blend the batch result into the inherited centers with an EWMA and
renormalize. Nothing here produces gradients; callers treat the embeddings
as constants.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import EmptyBatchError, RoutingError, ShapeError

DEGENERATE_NORM = 1e-12


class DegenerateClusterWarning(RuntimeWarning):
    """A cluster's weighted sum vanished and its previous center was kept."""


@dataclass
class RoutingConfig:
    K: int = 3
    iterations: int = 3
    ewma_beta: float = 0.9
    init_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise RoutingError(f"K must be >= 1, got {self.K}")
        if self.iterations < 1:
            raise RoutingError(f"iterations must be >= 1, got {self.iterations}")
        if not 0.0 <= self.ewma_beta < 1.0:
            raise RoutingError(f"ewma_beta must be in [0, 1), got {self.ewma_beta}")
        if self.init_sigma <= 0:
            raise RoutingError("init_sigma must be positive")


@dataclass
class ClusterCenters:
    centers: np.ndarray  # (K, dim), rows unit norm
    batch_step: int = 0

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def copy(self) -> "ClusterCenters":
        return ClusterCenters(self.centers.copy(), self.batch_step)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def init_centers(config: RoutingConfig, dim: int, rng: np.random.Generator | None = None) -> ClusterCenters:
    """Gaussian draws, each row L2-normalized. ``rng`` defaults to ``config.seed``."""
    if dim < 1:
        raise RoutingError(f"center dim must be >= 1, got {dim}")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    raw = rng.normal(0.0, config.init_sigma, size=(config.K, dim))
    return ClusterCenters(_normalize_rows(raw), batch_step=0)


def _check_embeddings(centers: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[1] != centers.shape[1]:
        raise ShapeError(f"embeddings {e.shape} do not match center dim {centers.shape[1]}")
    return e


def similarity_scores(centers: ClusterCenters | np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    c = centers.centers if isinstance(centers, ClusterCenters) else np.asarray(centers)
    e = _check_embeddings(c, embeddings)
    return e @ c.T


def distribution_coefficients(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax, max-subtracted."""
    s = np.asarray(scores, dtype=np.float64)
    z = np.exp(s - s.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def recompute_centers(coeffs: np.ndarray, embeddings: np.ndarray, previous: np.ndarray) -> np.ndarray:
    """normalize(sum_i r_ij e_i) per cluster; a vanishing sum keeps ``previous[j]``."""
    sums = coeffs.T @ embeddings
    norms = np.linalg.norm(sums, axis=1)
    out = previous.copy()
    ok = norms >= DEGENERATE_NORM
    out[ok] = sums[ok] / norms[ok, None]
    if not ok.all():
        warnings.warn(
            f"degenerate cluster(s) {np.flatnonzero(~ok).tolist()}: kept previous center",
            DegenerateClusterWarning,
            stacklevel=2,
        )
    return out


def route_batch(
    centers: ClusterCenters, embeddings: np.ndarray, config: RoutingConfig
) -> tuple[np.ndarray, ClusterCenters]:
    """Route one training batch.

    Returns the coefficients of the last iteration and a new
    ``ClusterCenters`` (the input object is not modified).
    """
    e = _check_embeddings(centers.centers, embeddings)
    if e.shape[0] == 0:
        raise EmptyBatchError("cannot route an empty batch")
    inherited = centers.centers
    current = inherited.copy()
    coeffs = None
    for _ in range(config.iterations):
        coeffs = distribution_coefficients(e @ current.T)
        current = recompute_centers(coeffs, e, current)
    blended = config.ewma_beta * inherited + (1.0 - config.ewma_beta) * current
    norms = np.linalg.norm(blended, axis=1, keepdims=True)
    # antipodal old/new centers can cancel; fall back to the inherited one
    blended = np.where(norms >= DEGENERATE_NORM, blended / np.maximum(norms, DEGENERATE_NORM), inherited)
    return coeffs, ClusterCenters(blended, centers.batch_step + 1)


def assign(coeffs: np.ndarray) -> np.ndarray:
    """Hard assignment: argmax per row, ties to the lowest index."""
    return np.argmax(coeffs, axis=1)


def infer_route(centers: ClusterCenters, embeddings: np.ndarray) -> np.ndarray:
    """Coefficients against frozen centers (one scoring pass, no update)."""
    return distribution_coefficients(similarity_scores(centers, embeddings))
