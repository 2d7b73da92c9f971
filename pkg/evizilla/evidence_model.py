"""Shared evidence head, fused forward pass, the three loss terms and their gradients.

The head is one two-layer perceptron applied to every hop:
E^ℓ = softplus(relu(X̃^ℓ W1 + b1) W2 + b2). Hop evidence is summed (cumulative
belief fusion in evidence form), turned into α = ê + 1, and scored with

    ECE + λ_Dis · Dis + λ_KL · KL

averaged over the labelled nodes. ``backward`` is the hand-written reverse pass
of exactly that pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple
import zipfile

import numpy as np

from .config import TrainConfig, canonical_json, from_mapping, snapshot_hash
from .errors import InputError
from .graph_core import PropagatedFeatures, perturb_rows
from .special_functions import digamma, lgamma, trigamma
from .subjective_logic import DirichletParams, Opinion, dissonance, relative_mass_balance, uniform_base_rate

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Elementwise pieces
# ---------------------------------------------------------------------------

def softplus(x):
    """ln(1 + e^x) without overflow for large |x|."""
    arr = np.asarray(x, dtype=np.float64)
    out = np.where(arr > 0.0, arr + np.log1p(np.exp(-np.abs(arr))), np.log1p(np.exp(np.minimum(arr, 0.0))))
    if np.ndim(x) == 0:
        return float(out)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelParams:
    """Weights of the shared evidence head: d -> h -> K."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        W1 = np.array(self.W1, dtype=np.float64)
        b1 = np.array(self.b1, dtype=np.float64).reshape(-1)
        W2 = np.array(self.W2, dtype=np.float64)
        b2 = np.array(self.b2, dtype=np.float64).reshape(-1)
        if W1.ndim != 2 or W2.ndim != 2:
            raise InputError("W1 and W2 must be matrices")
        if W1.shape[1] < 1:
            raise InputError("hidden size must be >= 1")
        if b1.size != W1.shape[1] or W2.shape[0] != W1.shape[1] or b2.size != W2.shape[1]:
            raise InputError(
                f"inconsistent head shapes W1{W1.shape} b1({b1.size},) W2{W2.shape} b2({b2.size},)"
            )
        for arr in (W1, b1, W2, b2):
            if not np.all(np.isfinite(arr)):
                raise InputError("model parameters must be finite")
        object.__setattr__(self, "W1", W1)
        object.__setattr__(self, "b1", b1)
        object.__setattr__(self, "W2", W2)
        object.__setattr__(self, "b2", b2)

    NAMES = ("W1", "b1", "W2", "b2")

    @property
    def input_dim(self) -> int:
        return int(self.W1.shape[0])

    @property
    def hidden_size(self) -> int:
        return int(self.W1.shape[1])

    @property
    def class_count(self) -> int:
        return int(self.W2.shape[1])

    def arrays(self) -> Tuple[np.ndarray, ...]:
        return (self.W1, self.b1, self.W2, self.b2)

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "ModelParams":
        W1, b1, W2, b2 = arrays
        return cls(W1=W1, b1=b1, W2=W2, b2=b2)

    @classmethod
    def zeros(cls, d: int, h: int, k: int) -> "ModelParams":
        return cls(W1=np.zeros((d, h)), b1=np.zeros(h), W2=np.zeros((h, k)), b2=np.zeros(k))

    @classmethod
    def glorot(cls, d: int, h: int, k: int, rng: np.random.Generator) -> "ModelParams":
        """Uniform fan-based initialisation, zero biases."""
        lim1 = np.sqrt(6.0 / (d + h))
        lim2 = np.sqrt(6.0 / (h + k))
        return cls(
            W1=rng.uniform(-lim1, lim1, size=(d, h)),
            b1=np.zeros(h),
            W2=rng.uniform(-lim2, lim2, size=(h, k)),
            b2=np.zeros(k),
        )


@dataclass(frozen=True)
class HopEvidenceSet:
    """Per-hop evidence matrices E^ℓ (rows = nodes, cols = classes)."""

    hops: Tuple[int, ...]
    evidence: Tuple[np.ndarray, ...]
    nodes: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.hops) != len(self.evidence):
            raise InputError("one evidence matrix per hop is required")
        shapes = {e.shape for e in self.evidence}
        if len(shapes) > 1:
            raise InputError(f"hop evidence matrices disagree in shape: {sorted(shapes)}")
        for e in self.evidence:
            if np.any(e < 0.0) or not np.all(np.isfinite(e)):
                raise InputError("evidence must be finite and non-negative")

    @property
    def class_count(self) -> int:
        return int(self.evidence[0].shape[1])

    def for_hop(self, hop: int) -> np.ndarray:
        return self.evidence[self.hops.index(int(hop))]

    def restricted(self, hops: Sequence[int]) -> "HopEvidenceSet":
        keep = [self.hops.index(int(h)) for h in hops]
        return HopEvidenceSet(
            hops=tuple(self.hops[i] for i in keep),
            evidence=tuple(self.evidence[i] for i in keep),
            nodes=self.nodes,
        )


@dataclass(frozen=True)
class LossWeights:
    lambda_kl: float = 0.0
    lambda_dis: float = 0.0

    def __post_init__(self):
        for name in ("lambda_kl", "lambda_dis"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0.0:
                raise InputError(f"{name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class FusedOpinions:
    """Joint Dirichlet and opinion for every row after fusion."""

    alpha: np.ndarray
    strength: np.ndarray
    belief: np.ndarray
    uncertainty: np.ndarray

    @property
    def expected_probability(self) -> np.ndarray:
        return self.alpha / self.strength[:, None]

    @property
    def prediction(self) -> np.ndarray:
        # argmax keeps the lowest index on ties
        return np.argmax(self.expected_probability, axis=1)

    def dirichlet(self, i: int) -> DirichletParams:
        return DirichletParams(alpha=self.alpha[i])

    def opinion(self, i: int) -> Opinion:
        k = self.alpha.shape[1]
        return Opinion(belief=self.belief[i], uncertainty=float(self.uncertainty[i]), base_rate=uniform_base_rate(k))


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

@dataclass
class _HopCache:
    x: np.ndarray
    z1: np.ndarray
    drop: Optional[np.ndarray]
    h: np.ndarray
    z2: np.ndarray


@dataclass
class _ForwardCache:
    hops: Tuple[int, ...]
    caches: List[_HopCache] = field(default_factory=list)

    def evidence(self) -> Tuple[np.ndarray, ...]:
        return tuple(softplus(c.z2) for c in self.caches)


def _check_head(params: ModelParams, hop_features: PropagatedFeatures):
    if hop_features.d != params.input_dim:
        raise InputError(f"features have d={hop_features.d}, head expects d={params.input_dim}")


def _run_head(
    params: ModelParams,
    hop_features: PropagatedFeatures,
    hops: Sequence[int],
    nodes: Optional[np.ndarray],
    *,
    train_mode: bool,
    perturb_sigma: float,
    dropout_rate: float,
    rng: Optional[np.random.Generator],
    dropout_rng: Optional[np.random.Generator],
) -> _ForwardCache:
    _check_head(params, hop_features)
    if not 0.0 <= float(dropout_rate) < 1.0:
        raise InputError(f"dropout rate must be in [0, 1), got {dropout_rate}")
    use_perturb = train_mode and float(perturb_sigma) > 0.0
    use_dropout = train_mode and float(dropout_rate) > 0.0
    if (use_perturb or use_dropout) and rng is None:
        raise InputError("train-mode forward with perturbation or dropout needs a random generator")
    dropout_rng = dropout_rng if dropout_rng is not None else rng
    cache = _ForwardCache(hops=tuple(int(h) for h in hops))
    for fm in hop_features.select(cache.hops):
        x = fm.data if nodes is None else fm.data[nodes]
        if use_perturb:
            x = perturb_rows(x, perturb_sigma, rng)
        z1 = x @ params.W1 + params.b1
        h = np.maximum(z1, 0.0)
        drop = None
        if use_dropout:
            keep = dropout_rng.random(h.shape) >= dropout_rate
            drop = keep.astype(np.float64) / (1.0 - dropout_rate)
            h = h * drop
        z2 = h @ params.W2 + params.b2
        cache.caches.append(_HopCache(x=x, z1=z1, drop=drop, h=h, z2=z2))
    return cache


def forward_evidence(
    params: ModelParams,
    hop_features: PropagatedFeatures,
    perturb_sigma: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    train_mode: bool = False,
    *,
    hops: Optional[Sequence[int]] = None,
    nodes: Optional[np.ndarray] = None,
    dropout_rate: float = 0.0,
    dropout_rng: Optional[np.random.Generator] = None,
) -> HopEvidenceSet:
    """Apply the shared head to each configured hop.

    ``hops`` defaults to every propagated hop 0..L; ``nodes`` restricts the rows.
    Perturbation and dropout only happen when ``train_mode`` is set.
    """
    hops = tuple(range(hop_features.steps + 1)) if hops is None else tuple(hops)
    if not hops:
        raise InputError("at least one hop is required")
    cache = _run_head(
        params,
        hop_features,
        hops,
        nodes,
        train_mode=train_mode,
        perturb_sigma=perturb_sigma,
        dropout_rate=dropout_rate,
        rng=rng,
        dropout_rng=dropout_rng,
    )
    node_idx = None if nodes is None else np.asarray(nodes)
    return HopEvidenceSet(hops=cache.hops, evidence=cache.evidence(), nodes=node_idx)


def fuse_forward(evidence: HopEvidenceSet) -> FusedOpinions:
    """Sum hop evidence and form the joint Dirichlet / opinion per row."""
    if not evidence.evidence:
        raise InputError("cannot fuse an empty hop set")
    fused = np.sum(evidence.evidence, axis=0)
    return opinions_from_evidence(fused)


def opinions_from_evidence(e: np.ndarray) -> FusedOpinions:
    e = np.asarray(e, dtype=np.float64)
    k = e.shape[1]
    alpha = e + 1.0
    strength = alpha.sum(axis=1)
    return FusedOpinions(alpha=alpha, strength=strength, belief=e / strength[:, None], uncertainty=k / strength)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _alpha_rows(alpha) -> Tuple[np.ndarray, bool]:
    if isinstance(alpha, DirichletParams):
        return alpha.alpha[None, :], True
    arr = np.asarray(alpha, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim != 2:
        raise InputError(f"alpha must be a vector or matrix, got shape {arr.shape}")
    return arr, False


def _onehot_rows(y, k: int, rows: int) -> np.ndarray:
    """Accept integer class labels (one per row) or a one-hot matrix."""
    arr = np.asarray(y)
    # with K >= 2 a one-hot block never has exactly one entry per row
    is_labels = np.issubdtype(arr.dtype, np.integer) and arr.ndim <= 1 and arr.size == rows
    if is_labels:
        labels = arr.reshape(-1)
        if np.any(labels < 0) or np.any(labels >= k):
            raise InputError(f"labels must lie in [0, {k})")
        return np.eye(k)[labels]
    arr = np.asarray(y, dtype=np.float64)
    if arr.size != rows * k:
        raise InputError(f"expected {rows} one-hot rows over {k} classes, got shape {arr.shape}")
    arr = arr.reshape(rows, k)
    if arr.shape[1] != k:
        raise InputError(f"one-hot labels have {arr.shape[1]} columns, alpha has {k}")
    if np.any((arr != 0.0) & (arr != 1.0)) or np.any(arr.sum(axis=1) != 1.0):
        raise InputError("labels must be one-hot")
    return arr


def _finish(values: np.ndarray, single: bool):
    return float(values[0]) if single else values


def loss_ece(alpha, y):
    """Σ_j y_j (ψ(S) − ψ(α_j)); per row for a matrix of α."""
    a, single = _alpha_rows(alpha)
    yy = _onehot_rows(y, a.shape[1], a.shape[0])
    s = a.sum(axis=1)
    out = np.sum(yy * (digamma(s)[:, None] - digamma(a)), axis=1)
    return _finish(out, single)


def loss_dissonance(alpha):
    a, single = _alpha_rows(alpha)
    s = a.sum(axis=1, keepdims=True)
    out = np.atleast_1d(dissonance((a - 1.0) / s))
    return _finish(out, single)


def loss_kl(alpha, y):
    """KL(Dir(α̃) ‖ Dir(1)) with the true-class entry of α̃ reset to 1."""
    a, single = _alpha_rows(alpha)
    k = a.shape[1]
    yy = _onehot_rows(y, k, a.shape[0])
    at = yy + (1.0 - yy) * a
    st = at.sum(axis=1)
    out = (
        lgamma(st)
        - lgamma(float(k))
        - np.sum(lgamma(at), axis=1)
        + np.sum((at - 1.0) * (digamma(at) - digamma(st)[:, None]), axis=1)
    )
    # exact zero at α̃ = 1 regardless of rounding in the series
    out = np.where(np.all(at == 1.0, axis=1), 0.0, out)
    return _finish(out, single)


def loss_total(alpha, y, weights: LossWeights) -> float:
    """Mean over rows of ECE + λ_Dis·Dis + λ_KL·KL."""
    a, _ = _alpha_rows(alpha)
    if a.shape[0] == 0:
        return 0.0
    total = np.atleast_1d(loss_ece(a, y))
    if weights.lambda_dis:
        total = total + weights.lambda_dis * np.atleast_1d(loss_dissonance(a))
    if weights.lambda_kl:
        total = total + weights.lambda_kl * np.atleast_1d(loss_kl(a, y))
    return float(np.mean(total))


def _dissonance_grad_belief(b: np.ndarray) -> np.ndarray:
    bal = relative_mass_balance(b)
    num = np.einsum("njq,nq->nj", bal, b)
    den = b.sum(axis=1, keepdims=True) - b
    r = np.divide(num, den, out=np.zeros_like(num), where=den > 0.0)
    w = np.divide(b, den, out=np.zeros_like(b), where=den > 0.0)
    # gx[m, l] = ∂Bal(x, y)/∂x at x = b_m, y = b_l
    bm = b[:, :, None]
    bl = b[:, None, :]
    total = bm + bl
    safe = np.where(total > 0.0, total, 1.0)
    gx = np.where((bm > 0.0) & (bl > 0.0), -np.sign(bm - bl) * 2.0 * bl / (safe * safe), 0.0)
    k = b.shape[1]
    gx[:, np.arange(k), np.arange(k)] = 0.0
    wr = w * r
    return (
        r
        + np.einsum("nj,njm->nm", w, bal)
        + b * np.einsum("nmj,nj->nm", gx, w)
        + w * np.einsum("nmq,nq->nm", gx, b)
        - (wr.sum(axis=1, keepdims=True) - wr)
    )


def loss_and_alpha_grad(alpha: np.ndarray, y_onehot: np.ndarray, weights: LossWeights) -> Tuple[float, np.ndarray]:
    """Mean total loss and its gradient with respect to every α entry."""
    a = np.asarray(alpha, dtype=np.float64)
    n, k = a.shape
    if n == 0:
        return 0.0, np.zeros_like(a)
    yy = np.asarray(y_onehot, dtype=np.float64)
    s = a.sum(axis=1)
    loss = float(loss_total(a, yy, weights))

    grad = trigamma(s)[:, None] - yy * trigamma(a)

    if weights.lambda_dis:
        e = a - 1.0
        gb = _dissonance_grad_belief(e / s[:, None])
        ge = gb / s[:, None] - np.sum(gb * e, axis=1, keepdims=True) / (s * s)[:, None]
        grad = grad + weights.lambda_dis * ge

    if weights.lambda_kl:
        at = yy + (1.0 - yy) * a
        st = at.sum(axis=1)
        gt = (at - 1.0) * trigamma(at) - ((st - k) * trigamma(st))[:, None]
        grad = grad + weights.lambda_kl * gt * (1.0 - yy)

    return loss, grad / n


def backward(
    params: ModelParams,
    hop_features: PropagatedFeatures,
    labels: np.ndarray,
    weights: LossWeights,
    rng: Optional[np.random.Generator] = None,
    *,
    nodes: Optional[np.ndarray] = None,
    hops: Optional[Sequence[int]] = None,
    perturb_sigma: float = 0.0,
    dropout_rate: float = 0.0,
    dropout_rng: Optional[np.random.Generator] = None,
) -> Tuple[float, ModelParams]:
    """Train-mode forward over ``nodes`` and the reverse pass of ``loss_total``.

    ``labels`` holds one integer class per node of the full graph. Returns the
    loss value and a ``ModelParams`` of gradients.
    """
    nodes = np.arange(hop_features.n) if nodes is None else np.asarray(nodes, dtype=np.int64)
    hops = tuple(range(hop_features.steps + 1)) if hops is None else tuple(hops)
    k = params.class_count
    if nodes.size == 0:
        return 0.0, ModelParams.zeros(params.input_dim, params.hidden_size, k)
    cache = _run_head(
        params,
        hop_features,
        hops,
        nodes,
        train_mode=True,
        perturb_sigma=perturb_sigma,
        dropout_rate=dropout_rate,
        rng=rng,
        dropout_rng=dropout_rng,
    )
    y = _onehot_rows(np.asarray(labels)[nodes].astype(np.int64), k, nodes.size)
    alpha = np.sum(cache.evidence(), axis=0) + 1.0
    loss, g_alpha = loss_and_alpha_grad(alpha, y, weights)

    gW1 = np.zeros_like(params.W1)
    gb1 = np.zeros_like(params.b1)
    gW2 = np.zeros_like(params.W2)
    gb2 = np.zeros_like(params.b2)
    for c in cache.caches:
        gz2 = g_alpha * _sigmoid(c.z2)
        gW2 += c.h.T @ gz2
        gb2 += gz2.sum(axis=0)
        gh = gz2 @ params.W2.T
        if c.drop is not None:
            gh = gh * c.drop
        gz1 = gh * (c.z1 > 0.0)
        gW1 += c.x.T @ gz1
        gb1 += gz1.sum(axis=0)
    return loss, ModelParams(W1=gW1, b1=gb1, W2=gW2, b2=gb2)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: Path | str, params: ModelParams, config: TrainConfig | Mapping) -> Path:
    """Write head weights plus the config snapshot and its hash to a .npz archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = canonical_json(config)
    with path.open("wb") as fh:
        np.savez(
            fh,
            format_version=np.array(CHECKPOINT_FORMAT_VERSION, dtype=np.int64),
            W1=params.W1,
            b1=params.b1,
            W2=params.W2,
            b2=params.b2,
            config_json=np.array(text),
            config_hash=np.array(snapshot_hash(config)),
        )
    log.info("checkpoint written to %s", path)
    return path


def load_checkpoint(path: Path | str) -> Tuple[ModelParams, TrainConfig]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            version = int(data["format_version"])
            if version != CHECKPOINT_FORMAT_VERSION:
                raise InputError(f"{path}: unsupported checkpoint format_version {version}")
            params = ModelParams.from_arrays([data[name] for name in ModelParams.NAMES])
            config = json.loads(str(data["config_json"]))
            stored_hash = str(data["config_hash"])
    except (KeyError, ValueError, OSError, EOFError, zipfile.BadZipFile) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"{path}: not a valid checkpoint ({exc})") from exc
    if snapshot_hash(config) != stored_hash:
        raise InputError(f"{path}: config hash mismatch; checkpoint is corrupt")
    return params, from_mapping(config)


__all__ = [
    "CHECKPOINT_FORMAT_VERSION",
    "FusedOpinions",
    "HopEvidenceSet",
    "LossWeights",
    "ModelParams",
    "backward",
    "forward_evidence",
    "fuse_forward",
    "load_checkpoint",
    "loss_and_alpha_grad",
    "loss_dissonance",
    "loss_ece",
    "loss_kl",
    "loss_total",
    "opinions_from_evidence",
    "save_checkpoint",
    "softplus",
]
