"""Subjective-logic opinions over K classes and cumulative belief fusion.

Evidence e maps to a Dirichlet with α = e + 1 (prior weight W = K) and to an
opinion with b_k = e_k / S, u = K / S. Base rates are uniform (1/K) unless a
caller passes its own.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DogmaticFusionError, InputError

_OPINION_TOL = 1e-9
_BASE_RATE_TOL = 1e-12


def _vector(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != 1:
        raise InputError(f"{name} must be a vector, got shape {arr.shape}")
    if arr.size < 2:
        raise InputError(f"{name} needs K >= 2 classes, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


def uniform_base_rate(k: int) -> np.ndarray:
    return np.full(int(k), 1.0 / int(k))


@dataclass(frozen=True)
class Evidence:
    e: np.ndarray

    def __post_init__(self):
        arr = _vector(self.e, "evidence")
        if np.any(arr < 0.0):
            raise InputError(f"evidence must be non-negative, got {arr.tolist()}")
        object.__setattr__(self, "e", arr)

    @property
    def k(self) -> int:
        return int(self.e.size)


@dataclass(frozen=True)
class DirichletParams:
    alpha: np.ndarray
    strength: float = float("nan")

    def __post_init__(self):
        arr = _vector(self.alpha, "alpha")
        if np.any(arr < 1.0):
            raise InputError(f"Dirichlet parameters must be >= 1, got {arr.tolist()}")
        object.__setattr__(self, "alpha", arr)
        object.__setattr__(self, "strength", float(arr.sum()))

    @property
    def k(self) -> int:
        return int(self.alpha.size)


@dataclass(frozen=True)
class Opinion:
    belief: np.ndarray
    uncertainty: float
    base_rate: np.ndarray

    def __post_init__(self):
        b = _vector(self.belief, "belief")
        a = _vector(self.base_rate, "base rate")
        u = float(self.uncertainty)
        if a.size != b.size:
            raise InputError(f"base rate has {a.size} entries, belief has {b.size}")
        if u < 0.0 or np.any(b < 0.0):
            raise InputError("belief and uncertainty masses must be non-negative")
        if abs(u + float(b.sum()) - 1.0) > _OPINION_TOL:
            raise InputError(f"u + sum(b) must be 1, got {u + float(b.sum())!r}")
        if abs(float(a.sum()) - 1.0) > _BASE_RATE_TOL:
            raise InputError(f"base rates must sum to 1, got {float(a.sum())!r}")
        object.__setattr__(self, "belief", b)
        object.__setattr__(self, "base_rate", a)
        object.__setattr__(self, "uncertainty", u)

    @property
    def k(self) -> int:
        return int(self.belief.size)

    @classmethod
    def vacuous(cls, k: int) -> "Opinion":
        return cls(belief=np.zeros(int(k)), uncertainty=1.0, base_rate=uniform_base_rate(k))


def evidence_to_dirichlet(e: Evidence) -> DirichletParams:
    if not isinstance(e, Evidence):
        e = Evidence(e)
    return DirichletParams(alpha=e.e + 1.0)


def dirichlet_to_opinion(alpha: DirichletParams, base_rate=None) -> Opinion:
    k = alpha.k
    a = uniform_base_rate(k) if base_rate is None else np.asarray(base_rate, dtype=np.float64)
    s = alpha.strength
    return Opinion(belief=(alpha.alpha - 1.0) / s, uncertainty=k / s, base_rate=a)


def opinion_from_evidence(e: Evidence, base_rate=None) -> Opinion:
    return dirichlet_to_opinion(evidence_to_dirichlet(e), base_rate)


def expected_probability(alpha: DirichletParams) -> np.ndarray:
    return alpha.alpha / alpha.strength


def projected_probability(op: Opinion) -> np.ndarray:
    return op.belief + op.base_rate * op.uncertainty


def fuse_evidence_cbf(hop_evidence: Sequence[Evidence]) -> Evidence:
    """Cumulative fusion in evidence form: plain addition."""
    items = list(hop_evidence)
    if not items:
        raise InputError("cannot fuse an empty list of evidence")
    items = [x if isinstance(x, Evidence) else Evidence(x) for x in items]
    k = items[0].k
    for i, x in enumerate(items):
        if x.k != k:
            raise InputError(f"evidence {i} has K={x.k}, expected K={k}")
    return Evidence(np.sum([x.e for x in items], axis=0))


def fuse_opinions_binary(w1: Opinion, w2: Opinion) -> Opinion:
    """Cumulative fusion of two opinions in belief/uncertainty form."""
    if w1.k != w2.k:
        raise InputError(f"cannot fuse opinions over K={w1.k} and K={w2.k}")
    if np.max(np.abs(w1.base_rate - w2.base_rate)) > _BASE_RATE_TOL:
        raise InputError("cumulative fusion needs a shared base rate")
    u1, u2 = w1.uncertainty, w2.uncertainty
    if u1 == 0.0 and u2 == 0.0:
        raise DogmaticFusionError("both opinions are dogmatic (u = 0); cumulative fusion is undefined")
    denom = u1 + u2 - u1 * u2
    belief = (w1.belief * u2 + u1 * w2.belief) / denom
    return Opinion(belief=belief, uncertainty=u1 * u2 / denom, base_rate=w1.base_rate)


def relative_mass_balance(b: np.ndarray) -> np.ndarray:
    """Pairwise Bal(b_q, b_j) over the last axis, shape (..., K, K), zero diagonal."""
    b = np.asarray(b, dtype=np.float64)
    lo = np.minimum(b[..., :, None], b[..., None, :])
    total = b[..., :, None] + b[..., None, :]
    safe = np.where(total > 0.0, total, 1.0)
    # 1 - |x-y|/(x+y) == 2 min(x,y)/(x+y); zero when either mass is zero
    bal = np.where(lo > 0.0, 2.0 * lo / safe, 0.0)
    k = b.shape[-1]
    bal[..., np.arange(k), np.arange(k)] = 0.0
    return bal


def dissonance(belief):
    """Dissonance of belief masses; 1-D input gives a float, 2-D gives one value per row.

    A class whose complementary mass is zero contributes nothing.
    """
    b = np.asarray(belief, dtype=np.float64)
    if b.ndim not in (1, 2):
        raise InputError(f"belief must be 1-D or 2-D, got shape {b.shape}")
    if np.any(b < 0.0):
        raise InputError("belief masses must be non-negative")
    bal = relative_mass_balance(b)
    num = np.einsum("...jq,...q->...j", bal, b)
    den = b.sum(axis=-1, keepdims=True) - b
    ratio = np.divide(num, den, out=np.zeros_like(num), where=den > 0.0)
    out = np.sum(b * ratio, axis=-1)
    if b.ndim == 1:
        return float(out)
    return out


__all__ = [
    "DirichletParams",
    "Evidence",
    "Opinion",
    "dirichlet_to_opinion",
    "dissonance",
    "evidence_to_dirichlet",
    "expected_probability",
    "fuse_evidence_cbf",
    "fuse_opinions_binary",
    "opinion_from_evidence",
    "projected_probability",
    "relative_mass_balance",
    "uniform_base_rate",
]
