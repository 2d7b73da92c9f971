"""Sparse graph structure and the embedding-propagation half of the model.

``normalize_adjacency`` builds D̃^{-1/2}(A+I)D̃^{-1/2} once; ``propagate`` then
applies it L times to the raw node features and keeps every intermediate hop,
since the evidence head consumes all of them every epoch.
"""

from __future__ import annotations

from dataclasses import dataclass
import logging
from typing import Iterable, List, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .errors import InputError

log = logging.getLogger(__name__)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SparseAdjacency:
    """Symmetric-normalised, self-looped adjacency in CSR form."""

    matrix: sp.csr_array

    @property
    def n(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def nnz(self) -> int:
        return int(self.matrix.nnz)

    @property
    def row_ptr(self) -> np.ndarray:
        return self.matrix.indptr

    @property
    def col_idx(self) -> np.ndarray:
        return self.matrix.indices

    @property
    def values(self) -> np.ndarray:
        return self.matrix.data

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def degrees(self) -> np.ndarray:
        """Self-looped degree d̃ recovered from the diagonal (Â_ii = 1/d̃_i)."""
        return 1.0 / self.matrix.diagonal()


@dataclass(frozen=True)
class FeatureMatrix:
    """Dense n×d node features, float64, read-only."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise InputError(f"feature matrix must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InputError("feature matrix contains non-finite entries")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def n(self) -> int:
        return int(self.data.shape[0])

    @property
    def d(self) -> int:
        return int(self.data.shape[1])

    def rows(self, index) -> np.ndarray:
        return self.data[index]


def as_feature_matrix(X) -> FeatureMatrix:
    if isinstance(X, FeatureMatrix):
        return X
    return FeatureMatrix(np.asarray(X, dtype=np.float64))


@dataclass(frozen=True)
class PropagatedFeatures:
    """Hop matrices X^0..X^L (hop 0 is the raw input)."""

    hops: Tuple[FeatureMatrix, ...]

    @property
    def steps(self) -> int:
        return len(self.hops) - 1

    @property
    def n(self) -> int:
        return self.hops[0].n

    @property
    def d(self) -> int:
        return self.hops[0].d

    def select(self, hop_indices: Sequence[int]) -> List[FeatureMatrix]:
        out = []
        for h in hop_indices:
            if not 0 <= int(h) <= self.steps:
                raise InputError(f"hop {h} not available; propagated 0..{self.steps}")
            out.append(self.hops[int(h)])
        return out


def _edge_array(edges: Iterable, n: int) -> np.ndarray:
    arr = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InputError(f"edges must be pairs, got array of shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise InputError("edge endpoints must be integers")
    arr = arr.astype(np.int64)
    bad = (arr < 0) | (arr >= n)
    if np.any(bad):
        i = int(np.argwhere(bad.any(axis=1))[0, 0])
        raise InputError(f"edge {tuple(arr[i])} has an endpoint outside [0, {n})")
    return arr


def normalize_adjacency(edges, n: int) -> SparseAdjacency:
    """Return Â = D̃^{-1/2}(A+I)D̃^{-1/2} for an undirected, unweighted edge list.

    Duplicate pairs (in either orientation) collapse to one edge; self-loop
    pairs in the input are ignored because the identity is added here.
    """
    if int(n) <= 0:
        raise InputError(f"node count must be positive, got {n}")
    n = int(n)
    pairs = _edge_array(edges, n)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    rows = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(n)])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(n)])
    a = sp.coo_array((np.ones(rows.size), (rows, cols)), shape=(n, n)).tocsr()
    a.sum_duplicates()
    a.data[:] = 1.0
    a.sort_indices()
    deg = np.diff(a.indptr).astype(np.float64)
    inv_sqrt = 1.0 / np.sqrt(deg)
    row_of = np.repeat(np.arange(n), np.diff(a.indptr))
    # product order is irrelevant in IEEE multiply, so Â_ij == Â_ji bit for bit
    a.data = inv_sqrt[row_of] * inv_sqrt[a.indices]
    for arr in (a.indptr, a.indices, a.data):
        _frozen(arr)
    return SparseAdjacency(matrix=a)


def propagate(adj: SparseAdjacency, X, L: int) -> PropagatedFeatures:
    """Compute X^0 = X and X^ℓ = Â X^{ℓ-1} for ℓ = 1..L."""
    X = as_feature_matrix(X)
    if adj.n != X.n:
        raise InputError(f"adjacency has {adj.n} nodes but features have {X.n} rows")
    if int(L) < 1:
        raise InputError(f"propagation step count must be >= 1, got {L}")
    hops = [X]
    current = X.data
    for _ in range(int(L)):
        current = np.asarray(adj.matrix @ current, dtype=np.float64)
        hops.append(FeatureMatrix(current))
    log.debug("propagated %d steps over %d nodes (nnz=%d, d=%d)", L, adj.n, adj.nnz, X.d)
    return PropagatedFeatures(hops=tuple(hops))


def standardize_hops(hop_features: PropagatedFeatures) -> PropagatedFeatures:
    """Center every hop's columns over all nodes, then scale rows to unit length.

    All-zero rows after centering stay zero.
    """
    out = []
    for fm in hop_features.hops:
        centered = fm.data - fm.data.mean(axis=0, keepdims=True)
        norms = np.linalg.norm(centered, axis=1, keepdims=True)
        out.append(FeatureMatrix(np.divide(centered, norms, out=np.zeros_like(centered), where=norms > 0)))
    return PropagatedFeatures(hops=tuple(out))


def perturb(X, sigma: float, rng: np.random.Generator) -> FeatureMatrix:
    """Zero whole node rows with probability ``sigma`` and rescale survivors."""
    X = as_feature_matrix(X)
    return FeatureMatrix(perturb_rows(X.data, sigma, rng))


def perturb_rows(data: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Array form of :func:`perturb`, used inside the training step."""
    sigma = float(sigma)
    if not 0.0 <= sigma < 1.0:
        raise InputError(f"perturbation probability must be in [0, 1), got {sigma}")
    keep = rng.random(data.shape[0]) >= sigma
    scale = keep.astype(np.float64) / (1.0 - sigma)
    return data * scale[:, None]


__all__ = [
    "FeatureMatrix",
    "PropagatedFeatures",
    "SparseAdjacency",
    "as_feature_matrix",
    "normalize_adjacency",
    "perturb",
    "perturb_rows",
    "propagate",
    "standardize_hops",
]
