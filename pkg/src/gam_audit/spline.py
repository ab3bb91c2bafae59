"""Cubic B-spline bases with second-order difference penalties."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import BasisError

log = logging.getLogger(__name__)

DEGREE = 3
MIN_BASIS = DEGREE + 1
MAX_BASIS = 30


@dataclass(frozen=True)
class KnotVector:
    """Clamped cubic knot vector: boundary knots repeated ``degree + 1`` times."""

    interior: np.ndarray
    lower: float
    upper: float
    degree: int = DEGREE

    def __post_init__(self):
        if not self.lower < self.upper:
            raise BasisError("boundary knots must satisfy lower < upper")
        if len(self.interior) and (
            np.any(np.diff(self.interior) <= 0)
            or self.interior[0] <= self.lower
            or self.interior[-1] >= self.upper
        ):
            raise BasisError("interior knots must be strictly ascending inside the boundary")

    @property
    def n_basis(self) -> int:
        return len(self.interior) + self.degree + 1

    @property
    def full(self) -> np.ndarray:
        order = self.degree + 1
        return np.concatenate([np.full(order, self.lower), self.interior, np.full(order, self.upper)])

    def to_dict(self):
        return {"interior": self.interior.tolist(), "lower": self.lower, "upper": self.upper}

    @classmethod
    def from_dict(cls, payload):
        return cls(np.asarray(payload["interior"], dtype=float), float(payload["lower"]), float(payload["upper"]))


def make_knots(values, k: int = 10) -> KnotVector:
    """Place ``k - 4`` interior knots at evenly spaced quantiles of the distinct values.

    If there are fewer than ``k`` distinct values, ``k`` is reduced to the
    number of distinct values with a warning.
    """
    if k < MIN_BASIS:
        raise BasisError(f"need at least {MIN_BASIS} basis functions, got {k}")
    distinct = np.unique(np.asarray(values, dtype=float))
    if len(distinct) < MIN_BASIS:
        raise BasisError(f"only {len(distinct)} distinct values; a cubic basis needs {MIN_BASIS}")
    if len(distinct) < k:
        log.warning("reducing basis size from %d to %d (distinct values)", k, len(distinct))
        k = len(distinct)
    probs = np.arange(1, k - 3) / (k - 3)
    interior = np.unique(np.quantile(distinct, probs))
    return KnotVector(interior, float(distinct[0]), float(distinct[-1]))


def _find_span(t, x, n_basis):
    # t[i] <= x < t[i + 1]; the right boundary belongs to the last span
    span = np.searchsorted(t, x, side="right") - 1
    return np.clip(span, DEGREE, n_basis - 1)


def eval_basis(kv: KnotVector, x) -> np.ndarray:
    """Evaluate all B-spline basis functions at ``x`` (clamped to the boundary).

    Uses de Boor's triangular recursion on the ``degree + 1`` functions that are
    non-zero in each knot span and scatters them into an ``(n, k)`` matrix.
    """
    x = np.clip(np.asarray(x, dtype=float), kv.lower, kv.upper)
    t = kv.full
    p = kv.degree
    k = kv.n_basis
    span = _find_span(t, x, k)

    values = np.zeros((len(x), p + 1))
    values[:, 0] = 1.0
    left = np.zeros((len(x), p + 1))
    right = np.zeros((len(x), p + 1))
    for j in range(1, p + 1):
        left[:, j] = x - t[span + 1 - j]
        right[:, j] = t[span + j] - x
        saved = np.zeros(len(x))
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = values[:, r] / denom
            values[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        values[:, j] = saved

    B = np.zeros((len(x), k))
    rows = np.arange(len(x))
    for r in range(p + 1):
        B[rows, span - p + r] = values[:, r]
    return B


def greville(kv: KnotVector) -> np.ndarray:
    """Greville abscissae: the coefficient of ``x`` in the basis is ``greville(kv)``."""
    t = kv.full
    p = kv.degree
    return np.array([t[i + 1:i + p + 1].mean() for i in range(kv.n_basis)])


def difference_matrix(k: int, order: int = 2, knots: KnotVector | None = None) -> np.ndarray:
    """Second differences of the coefficients.

    With ``knots`` the first differences are divided by the Greville spacing
    (scaled by its mean), so exactly the coefficient vectors of ``a + b * x``
    are annihilated. On evenly spaced Greville points this equals the plain
    unit-step operator.
    """
    if order != 2 or knots is None:
        return np.diff(np.eye(k), order, axis=0)
    if knots.n_basis != k:
        raise BasisError(f"knot vector has {knots.n_basis} basis functions, expected {k}")
    h = np.diff(greville(knots))
    D1 = np.diff(np.eye(k), 1, axis=0) * (h.mean() / h)[:, None]
    return np.diff(D1, 1, axis=0)


def penalty_matrix(k: int, knots: KnotVector | None = None) -> np.ndarray:
    """``D.T @ D`` for the second-order difference operator on ``k`` coefficients."""
    if k < MIN_BASIS:
        raise BasisError(f"need at least {MIN_BASIS} basis functions, got {k}")
    D = difference_matrix(k, knots=knots)
    return D.T @ D


def penalty_root(S) -> np.ndarray:
    """Return ``E`` with ``E.T @ E == S`` for a symmetric PSD ``S``."""
    S = np.asarray(S, dtype=float)
    evals, evecs = np.linalg.eigh((S + S.T) / 2)
    evals = np.clip(evals, 0.0, None)
    keep = evals > evals.max(initial=0.0) * 1e-12
    return (evecs[:, keep] * np.sqrt(evals[keep])).T


@dataclass(frozen=True)
class SmoothDesign:
    """A smooth term reparameterized to satisfy the sum-to-zero constraint.

    ``basis = raw_basis @ Z`` and ``penalty = Z.T @ S @ Z``; ``offset`` holds the
    column means of the raw basis on the data used for centering.
    """

    basis: np.ndarray
    penalty: np.ndarray
    Z: np.ndarray
    offset: np.ndarray
    name: str = ""


def centering_matrix(offset) -> np.ndarray:
    """Orthonormal basis of the complement of ``offset`` (Householder QR)."""
    offset = np.asarray(offset, dtype=float).reshape(-1, 1)
    q, _ = np.linalg.qr(offset, mode="complete")
    return q[:, 1:]


def center_smooth(B, S, name: str = "") -> SmoothDesign:
    B = np.asarray(B, dtype=float)
    if B.ndim != 2 or B.shape[1] < 2:
        raise BasisError("centering needs a basis with at least two columns")
    offset = B.mean(axis=0)
    Z = centering_matrix(offset)
    return SmoothDesign(basis=B @ Z, penalty=Z.T @ np.asarray(S) @ Z, Z=Z, offset=offset, name=name)
