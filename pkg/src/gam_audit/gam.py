"""Gaussian additive models fitted by penalized least squares.

The model is ``y = a + sum_j f_j(x_j) + e`` with each continuous ``f_j`` a
centered cubic B-spline carrying a second-order difference penalty and each
binary feature entering as a single unpenalized linear column.

The training design ``X`` is reduced once by a thin QR, ``X = Q R``. Any
column subset of ``X`` and any set of smoothing parameters can then be solved
on the small system ``(R[:, cols], Q.T y)``, because for every coefficient
vector ``||y - X b||^2 = ||Q.T y - R b||^2 + rss0``. Each penalized solve is
a QR of the augmented matrix ``[R; sqrt(lambda) E]`` so the normal equations
are never formed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import BINARY, Dataset, ScalingParams
from .errors import ConfigError, PredictionError, SingularFitError
from .spline import KnotVector, center_smooth, difference_matrix, eval_basis, make_knots, penalty_matrix

log = logging.getLogger(__name__)

LAMBDA_GRID = tuple(10.0**e for e in range(-6, 7))
DEFAULT_BASIS = 10
GCV_SWEEPS = 2
LAMBDA_START = 1.0
RANK_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class Term:
    """One additive component: its basis, centering and penalty."""

    name: str
    kind: str
    lower: float
    upper: float
    knots: KnotVector | None = None
    Z: np.ndarray | None = None

    @property
    def penalized(self) -> bool:
        return self.kind == "spline"

    @property
    def width(self) -> int:
        return self.Z.shape[1] if self.penalized else 1

    @property
    def root(self) -> np.ndarray:
        """Penalty square root ``E`` with ``E.T @ E`` the centered penalty."""
        if not self.penalized:
            return np.zeros((0, 1))
        return difference_matrix(self.knots.n_basis, knots=self.knots) @ self.Z

    @property
    def penalty(self) -> np.ndarray:
        if not self.penalized:
            return np.zeros((1, 1))
        return self.Z.T @ penalty_matrix(self.knots.n_basis, self.knots) @ self.Z

    def design(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.penalized:
            return eval_basis(self.knots, x) @ self.Z
        return x.reshape(-1, 1)

    def to_dict(self):
        out = {"name": self.name, "kind": self.kind, "lower": self.lower, "upper": self.upper}
        if self.penalized:
            out["knots"] = self.knots.to_dict()
            out["Z"] = self.Z.tolist()
        return out

    @classmethod
    def from_dict(cls, payload):
        if payload["kind"] == "spline":
            return cls(
                payload["name"],
                "spline",
                float(payload["lower"]),
                float(payload["upper"]),
                KnotVector.from_dict(payload["knots"]),
                np.asarray(payload["Z"], dtype=float),
            )
        return cls(payload["name"], "linear", float(payload["lower"]), float(payload["upper"]))


def make_term(name: str, values, kind: str, n_basis: int = DEFAULT_BASIS) -> Term:
    values = np.asarray(values, dtype=float)
    lo, hi = float(values.min()), float(values.max())
    if kind == BINARY:
        return Term(name, "linear", lo, hi)
    kv = make_knots(values, n_basis)
    smooth = center_smooth(eval_basis(kv, values), penalty_matrix(kv.n_basis, kv), name=name)
    return Term(name, "spline", kv.lower, kv.upper, kv, smooth.Z)


def make_terms(d: Dataset, features: Sequence[str], n_basis: int = DEFAULT_BASIS) -> list[Term]:
    return [make_term(name, d.column(name), d.kinds[name], n_basis) for name in features]


@dataclass
class Solution:
    beta: np.ndarray
    rss: float
    edf_blocks: np.ndarray
    edf_total: float
    gcv: float


class PenalizedSystem:
    """Reduced least-squares problem for a fixed ordered set of terms."""

    def __init__(self, terms, R, f, rss0, n, columns):
        self.terms = tuple(terms)
        self.R = R
        self.f = f
        self.rss0 = rss0
        self.n = n
        # positions of each term inside the full design (for fitted values)
        self.columns = columns
        self.blocks = []
        start = 1
        for term in self.terms:
            self.blocks.append(slice(start, start + term.width))
            start += term.width
        self.p = start

    def _owner(self, col) -> str:
        for term, block in zip(self.terms, self.blocks):
            if block.start <= col < block.stop:
                return term.name
        return "(intercept)"

    def solve(self, lambdas: Mapping[str, float]) -> Solution:
        rows = [self.R]
        for term, block in zip(self.terms, self.blocks):
            lam = lambdas.get(term.name, 0.0) if term.penalized else 0.0
            if lam < 0:
                raise ConfigError(f"smoothing parameter for {term.name!r} must be >= 0")
            if lam > 0:
                root = term.root
                E = np.zeros((root.shape[0], self.p))
                E[:, block] = math.sqrt(lam) * root
                rows.append(E)
        aug = np.vstack(rows)
        Q1, R1 = np.linalg.qr(aug)
        diag = np.abs(np.diag(R1))
        scale = diag.max() if len(diag) else 1.0
        weak = np.flatnonzero(diag <= RANK_TOL * scale)
        if len(weak):
            raise SingularFitError(self._owner(int(weak[0])))
        top = Q1[: self.p]
        beta = np.linalg.solve(R1, top.T @ self.f)
        resid = self.f - self.R @ beta
        rss = float(self.rss0 + resid @ resid)
        # influence matrix F = (R'R + P)^-1 R'R = R1^-1 top' R
        M = np.linalg.solve(R1, top.T)
        edf_diag = np.sum(M * self.R.T, axis=1)
        edf_blocks = np.array([edf_diag[b].sum() for b in self.blocks])
        edf_total = float(np.sum(top * top))
        gcv = self.n * rss / (self.n - edf_total) ** 2 if self.n > edf_total else math.inf
        return Solution(beta, rss, edf_blocks, edf_total, gcv)


class GamProblem:
    """Training design for a set of terms, QR-reduced once and shared by sub-models."""

    def __init__(self, train: Dataset, terms: Sequence[Term]):
        self.train = train
        self.terms = tuple(terms)
        y = np.asarray(train.label, dtype=float)
        n = len(y)
        self.term_index = {t.name: i for i, t in enumerate(self.terms)}
        if len(self.term_index) != len(self.terms):
            raise ConfigError("duplicate feature in model")
        blocks = []
        parts = [np.ones((n, 1))]
        start = 1
        for term in self.terms:
            parts.append(term.design(train.column(term.name)))
            blocks.append(slice(start, start + term.width))
            start += term.width
        self.blocks = blocks
        self.X = np.hstack(parts)
        self.y = y
        self.n = n
        self.tss = float(np.sum((y - y.mean()) ** 2))
        Q, R = np.linalg.qr(self.X)
        f = Q.T @ y
        resid = y - Q @ f
        self.R = R
        self.f = f
        self.rss0 = float(resid @ resid)

    @classmethod
    def from_dataset(cls, train: Dataset, features: Sequence[str], n_basis: int = DEFAULT_BASIS):
        return cls(train, make_terms(train, features, n_basis))

    def system(self, names: Sequence[str] | None = None) -> PenalizedSystem:
        names = [t.name for t in self.terms] if names is None else list(names)
        for name in names:
            if name not in self.term_index:
                raise ConfigError(f"feature {name!r} is not part of this model")
        terms = [self.terms[self.term_index[n]] for n in names]
        cols = [0]
        for n in names:
            b = self.blocks[self.term_index[n]]
            cols.extend(range(b.start, b.stop))
        if cols == list(range(self.X.shape[1])):
            return PenalizedSystem(terms, self.R, self.f, self.rss0, self.n, cols)
        A = self.R[:, cols]
        Qs, Rs = np.linalg.qr(A)
        fs = Qs.T @ self.f
        extra = self.f - Qs @ fs
        return PenalizedSystem(terms, Rs, fs, self.rss0 + float(extra @ extra), self.n, cols)


@dataclass(frozen=True, eq=False)
class FitMetrics:
    deviance: float
    null_deviance: float
    d2: float | None
    edf_total: float
    gcv: float

    @property
    def degenerate(self) -> bool:
        return self.d2 is None


@dataclass(frozen=True, eq=False)
class FeatureShape:
    feature: str
    grid: np.ndarray
    values: np.ndarray
    sd: float

    def to_dict(self):
        return {"feature": self.feature, "grid": self.grid.tolist(), "values": self.values.tolist(), "sd": self.sd}


@dataclass(frozen=True, eq=False)
class FittedGam:
    terms: tuple[Term, ...]
    intercept: float
    coefs: dict[str, np.ndarray]
    lambdas: dict[str, float]
    edf_terms: dict[str, float]
    edf_total: float
    rss: float
    tss: float
    n: int
    gcv: float
    term_sd: dict[str, float]
    fitted_sd: float
    label_name: str = "label"
    scaling: ScalingParams | None = None
    n_basis: int = DEFAULT_BASIS

    @property
    def features(self) -> list[str]:
        return [t.name for t in self.terms]

    @property
    def d2_train(self) -> float:
        return 1.0 - self.rss / self.tss if self.tss > 0 else 0.0

    def term(self, name) -> Term:
        for t in self.terms:
            if t.name == name:
                return t
        raise ConfigError(f"feature {name!r} is not in the model")

    def term_values(self, name, x) -> np.ndarray:
        return self.term(name).design(x) @ self.coefs[name]

    def predict(self, X) -> np.ndarray:
        return predict(self, X)

    def to_dict(self):
        return {
            "family": "gaussian",
            "link": "identity",
            "n_basis": self.n_basis,
            "label": self.label_name,
            "intercept": self.intercept,
            "terms": [t.to_dict() for t in self.terms],
            "coefficients": {k: v.tolist() for k, v in self.coefs.items()},
            "lambdas": self.lambdas,
            "edf": self.edf_terms,
            "edf_total": self.edf_total,
            "rss": self.rss,
            "tss": self.tss,
            "n": self.n,
            "gcv": self.gcv,
            "d2_train": self.d2_train,
            "term_sd": self.term_sd,
            "fitted_sd": self.fitted_sd,
            "scaling": self.scaling.to_dict() if self.scaling else None,
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            terms=tuple(Term.from_dict(t) for t in payload["terms"]),
            intercept=float(payload["intercept"]),
            coefs={k: np.asarray(v, dtype=float) for k, v in payload["coefficients"].items()},
            lambdas={k: float(v) for k, v in payload["lambdas"].items()},
            edf_terms={k: float(v) for k, v in payload["edf"].items()},
            edf_total=float(payload["edf_total"]),
            rss=float(payload["rss"]),
            tss=float(payload["tss"]),
            n=int(payload["n"]),
            gcv=float(payload["gcv"]),
            term_sd={k: float(v) for k, v in payload["term_sd"].items()},
            fitted_sd=float(payload["fitted_sd"]),
            label_name=payload.get("label", "label"),
            scaling=ScalingParams.from_dict(payload["scaling"]) if payload.get("scaling") else None,
            n_basis=int(payload.get("n_basis", DEFAULT_BASIS)),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _assemble(problem: GamProblem, system: PenalizedSystem, sol: Solution, lambdas, n_basis) -> FittedGam:
    X = problem.X[:, system.columns]
    fitted = X @ sol.beta
    resid = problem.y - fitted
    coefs = {}
    term_sd = {}
    edf_terms = {}
    for term, block, e in zip(system.terms, system.blocks, sol.edf_blocks):
        coefs[term.name] = sol.beta[block].copy()
        term_sd[term.name] = float(np.std(X[:, block] @ sol.beta[block]))
        # an unpenalized column contributes exactly one degree of freedom
        edf_terms[term.name] = float(e) if term.penalized else 1.0
    return FittedGam(
        terms=system.terms,
        intercept=float(sol.beta[0]),
        coefs=coefs,
        lambdas={t.name: (float(lambdas.get(t.name, 0.0)) if t.penalized else 0.0) for t in system.terms},
        edf_terms=edf_terms,
        edf_total=1.0 + sum(edf_terms.values()),
        rss=float(resid @ resid),
        tss=problem.tss,
        n=problem.n,
        gcv=sol.gcv,
        term_sd=term_sd,
        fitted_sd=float(np.std(fitted)),
        label_name=problem.train.label_name,
        scaling=problem.train.scaling,
        n_basis=n_basis,
    )


def fit(
    train: Dataset,
    features: Sequence[str],
    lambdas: Mapping[str, float] | None = None,
    n_basis: int = DEFAULT_BASIS,
    problem: GamProblem | None = None,
) -> FittedGam:
    """Fit at fixed smoothing parameters (missing entries default to 0).

    An empty feature list yields the intercept-only model.
    """
    features = list(features)
    if problem is None:
        problem = GamProblem.from_dataset(train, features, n_basis)
    system = problem.system(features)
    lambdas = dict(lambdas or {})
    return _assemble(problem, system, system.solve(lambdas), lambdas, n_basis)


def search_lambdas(
    system: PenalizedSystem,
    grid: Sequence[float] = LAMBDA_GRID,
    sweeps: int = GCV_SWEEPS,
    start: float = LAMBDA_START,
) -> tuple[dict[str, float], Solution]:
    """Cyclic coordinate descent on GCV over a fixed grid, terms in declared order."""
    names = [t.name for t in system.terms if t.penalized]
    lam = {n: start for n in names}

    def score(trial):
        try:
            sol = system.solve(trial)
        except SingularFitError:
            return math.inf, None
        return sol.gcv, sol

    best_score, best = score(lam)
    for _ in range(sweeps):
        for name in names:
            for value in grid:
                trial = {**lam, name: value}
                s, sol = score(trial)
                if s < best_score:
                    best_score, best, lam = s, sol, trial
    if best is None:
        # re-raise the underlying singularity with the offending feature
        system.solve(lam)
        raise SingularFitError("(unknown)", "no smoothing parameter yields a finite GCV score")
    return lam, best


def optimize_lambdas(
    train: Dataset,
    features: Sequence[str],
    n_basis: int = DEFAULT_BASIS,
    grid: Sequence[float] = LAMBDA_GRID,
    sweeps: int = GCV_SWEEPS,
    problem: GamProblem | None = None,
) -> FittedGam:
    """Fit with per-feature smoothing parameters chosen by minimizing GCV."""
    features = list(features)
    if problem is None:
        problem = GamProblem.from_dataset(train, features, n_basis)
    system = problem.system(features)
    lam, sol = search_lambdas(system, grid, sweeps)
    return _assemble(problem, system, sol, lam, n_basis)


def _columns_of(X) -> Mapping[str, np.ndarray]:
    if isinstance(X, Dataset):
        return X.columns
    return X


def predict(g: FittedGam, X) -> np.ndarray:
    """``a + sum_j f_j(x_j)`` for rows of ``X`` (a Dataset or name -> array mapping)."""
    cols = _columns_of(X)
    missing = [t.name for t in g.terms if t.name not in cols]
    if missing:
        raise PredictionError(f"missing feature columns for prediction: {missing}")
    if g.terms:
        n = len(cols[g.terms[0].name])
    elif isinstance(X, Dataset):
        n = X.n_rows
    else:
        n = len(next(iter(cols.values()))) if cols else 0
    out = np.full(n, g.intercept)
    for term in g.terms:
        out += term.design(cols[term.name]) @ g.coefs[term.name]
    return out


def gaussian_loglik(y, mu, sigma2: float = 1.0) -> float:
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    return float(np.sum(-0.5 * math.log(2 * math.pi * sigma2) - (y - mu) ** 2 / (2 * sigma2)))


def scaled_deviance(y, mu) -> float:
    """``2 * (loglik(saturated) - loglik(mu))`` at unit variance."""
    return 2.0 * (gaussian_loglik(y, y) - gaussian_loglik(y, mu))


def deviance(g: FittedGam, d: Dataset) -> FitMetrics:
    """Deviance, null deviance and explained fraction on ``d`` (null model uses ``d``'s mean)."""
    y = np.asarray(d.label, dtype=float)
    mu = predict(g, d)
    dev = scaled_deviance(y, mu)
    null = scaled_deviance(y, np.full_like(y, y.mean()))
    d2 = 1.0 - dev / null if null > 0 else None
    return FitMetrics(deviance=dev, null_deviance=null, d2=d2, edf_total=g.edf_total, gcv=g.gcv)


def edf(g: FittedGam) -> tuple[dict[str, float], float]:
    return dict(g.edf_terms), g.edf_total


def shape(g: FittedGam, feature: str, grid_size: int = 200) -> FeatureShape:
    """Evaluate one feature shape on an even grid over the training range.

    The grid is returned in original units when the model carries scaling
    parameters for the feature.
    """
    term = g.term(feature)
    grid = np.linspace(term.lower, term.upper, grid_size)
    values = g.term_values(feature, grid)
    axis = g.scaling.inverse(feature, grid) if g.scaling is not None else grid
    return FeatureShape(feature, axis, values, g.term_sd[feature])
