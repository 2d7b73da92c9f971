"""Digamma, trigamma and log-gamma kernels for the Dirichlet losses.

Every kernel shifts its argument upward with the exact recurrence until it
reaches ``_SHIFT_TO`` and then evaluates the Bernoulli-coefficient asymptotic
series there. Inputs may be Python floats or numpy arrays; scalars come back as
floats, arrays as float64 arrays of the same shape.
"""

from __future__ import annotations

import math
from typing import Tuple

import numpy as np

from .errors import DomainError

_SHIFT_TO = 6.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# B_2k / (2k), highest order last; series in 1/x^2 for digamma.
_DIGAMMA_SERIES = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)

# B_2k, series in 1/x^(2k+1) for trigamma.
_TRIGAMMA_SERIES = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
)

# B_2k / (2k(2k-1)), series in 1/x^(2k-1) for Stirling's log-gamma.
_STIRLING_SERIES = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
)


def _positive_array(x, name: str) -> Tuple[np.ndarray, bool]:
    scalar = np.ndim(x) == 0
    arr = np.array(x, dtype=np.float64, copy=True, ndmin=1)
    bad = ~(np.isfinite(arr) & (arr > 0.0))
    if np.any(bad):
        first = arr[bad].flat[0]
        raise DomainError(f"{name} is defined for finite x > 0, got {first!r}")
    return arr, scalar


def _finish(values: np.ndarray, scalar: bool):
    if scalar:
        return float(values.reshape(-1)[0])
    return values


def _horner(coeffs, z: np.ndarray) -> np.ndarray:
    # sum_k coeffs[k] * z**k, k = 0..len-1
    acc = np.zeros_like(z)
    for c in reversed(coeffs):
        acc = acc * z + c
    return acc


def digamma(x):
    """ψ(x) = d/dx ln Γ(x) for x > 0."""
    z, scalar = _positive_array(x, "digamma")
    shift = np.zeros_like(z)
    small = z < _SHIFT_TO
    while np.any(small):
        shift[small] -= 1.0 / z[small]
        z[small] += 1.0
        small = z < _SHIFT_TO
    inv2 = 1.0 / (z * z)
    out = np.log(z) - 0.5 / z - inv2 * _horner(_DIGAMMA_SERIES, inv2)
    return _finish(out + shift, scalar)


def trigamma(x):
    """ψ'(x) for x > 0."""
    z, scalar = _positive_array(x, "trigamma")
    shift = np.zeros_like(z)
    small = z < _SHIFT_TO
    while np.any(small):
        shift[small] += 1.0 / (z[small] * z[small])
        z[small] += 1.0
        small = z < _SHIFT_TO
    inv = 1.0 / z
    inv2 = inv * inv
    out = inv + 0.5 * inv2 + inv2 * inv * _horner(_TRIGAMMA_SERIES, inv2)
    return _finish(out + shift, scalar)


def lgamma(x):
    """ln Γ(x) for x > 0."""
    z, scalar = _positive_array(x, "lgamma")
    prod = np.ones_like(z)
    small = z < _SHIFT_TO
    while np.any(small):
        prod[small] *= z[small]
        z[small] += 1.0
        small = z < _SHIFT_TO
    inv = 1.0 / z
    out = (z - 0.5) * np.log(z) - z + _HALF_LOG_2PI + inv * _horner(_STIRLING_SERIES, inv * inv)
    return _finish(out - np.log(prod), scalar)


__all__ = ["digamma", "lgamma", "trigamma"]
